#include "fan/tensor.hpp"

#include <algorithm>
#include <cblas.h>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <unordered_set>

#include "json.hpp"

namespace fan {

namespace {

// BLAS-internal threading would make gradient reduction order (and therefore
// checkpoints) nondeterministic; parallelism lives at the batch level instead.
const bool g_blas_single_thread = [] {
    openblas_set_num_threads(1);
    return true;
}();

thread_local bool g_grad_enabled = true;

std::size_t shape_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int d : shape) {
        if (d <= 0) throw std::invalid_argument("Tensor: shape dims must be positive");
        n *= std::size_t(d);
    }
    return n;
}

std::string shape_str(const std::vector<int>& s) {
    std::string r = "[";
    for (std::size_t i = 0; i < s.size(); ++i) r += (i ? "," : "") + std::to_string(s[i]);
    return r + "]";
}

[[noreturn]] void shape_error(const char* op, const std::vector<int>& a,
                              const std::vector<int>& b) {
    throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a) + " vs " +
                                shape_str(b));
}

NodePtr make_node(std::vector<int> shape, std::vector<real> val) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val = std::move(val);
    return n;
}

// Attach parents and a backward closure if grad recording is active.
void record(const NodePtr& n, std::vector<NodePtr> parents, std::function<void(Node&)> fn) {
    if (!g_grad_enabled) return;
    bool need = false;
    for (const auto& p : parents)
        if (p && p->requires_grad) need = true;
    if (!need) return;
    n->requires_grad = true;
    n->parents = std::move(parents);
    n->backward_fn = std::move(fn);
}

}  // namespace

void Node::ensure_grad() {
    if (grad.size() != val.size()) grad.assign(val.size(), 0.0);
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set(bool on) { g_grad_enabled = on; }

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    auto n = make_node(shape, std::vector<real>(shape_numel(shape), 0.0));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<real> data, bool requires_grad) {
    if (shape_numel(shape) != data.size())
        throw std::invalid_argument("Tensor::from_data: shape does not match data size");
    auto n = make_node(std::move(shape), std::move(data));
    n->requires_grad = requires_grad;
    return Tensor(n);
}

Tensor Tensor::scalar(real v) { return from_data({1}, {v}); }

std::vector<real>& Tensor::grad() {
    n_->ensure_grad();
    return n_->grad;
}

real Tensor::item() const {
    if (numel() != 1) throw std::logic_error("Tensor::item: not a scalar");
    return n_->val[0];
}

void Tensor::zero_grad() {
    if (n_) n_->grad.assign(n_->val.size(), 0.0);
}

void Tensor::backward() {
    if (!n_) throw std::logic_error("backward on undefined tensor");
    if (numel() != 1) throw std::logic_error("backward requires a scalar root");
    if (!n_->requires_grad) return;

    // Iterative DFS topological order.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack{{n_.get(), 0}};
    visited.insert(n_.get());
    while (!stack.empty()) {
        auto& [node, idx] = stack.back();
        if (idx < node->parents.size()) {
            Node* p = node->parents[idx++].get();
            if (p && p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.push_back({p, 0});
            }
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    for (Node* node : order) node->ensure_grad();
    n_->grad[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn(**it);
}

// --- elementwise ---------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary_op(const char* /*name*/, const Tensor& x, Fwd fwd, Bwd bwd_factor) {
    const auto& xv = x.values();
    std::vector<real> out(xv.size());
    for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
    auto n = make_node(x.shape(), std::move(out));
    NodePtr xp = x.node();
    record(n, {xp}, [xp, bwd_factor](Node& self) {
        for (std::size_t i = 0; i < self.val.size(); ++i)
            xp->grad[i] += self.grad[i] * bwd_factor(xp->val[i], self.val[i]);
    });
    return Tensor(n);
}

}  // namespace

Tensor relu(const Tensor& x) {
    return unary_op("relu", x, [](real v) { return v > 0 ? v : 0; },
                    [](real xin, real) { return xin > 0 ? 1.0 : 0.0; });
}

Tensor sigmoid(const Tensor& x) {
    return unary_op("sigmoid", x, [](real v) { return 1.0 / (1.0 + std::exp(-v)); },
                    [](real, real y) { return y * (1.0 - y); });
}

Tensor exp(const Tensor& x) {
    return unary_op("exp", x, [](real v) { return std::exp(v); },
                    [](real, real y) { return y; });
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("add", a.shape(), b.shape());
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    auto n = make_node(a.shape(), std::move(out));
    NodePtr ap = a.node(), bp = b.node();
    record(n, {ap, bp}, [ap, bp](Node& self) {
        if (ap->requires_grad)
            for (std::size_t i = 0; i < self.val.size(); ++i) ap->grad[i] += self.grad[i];
        if (bp->requires_grad)
            for (std::size_t i = 0; i < self.val.size(); ++i) bp->grad[i] += self.grad[i];
    });
    return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) shape_error("mul", a.shape(), b.shape());
    std::vector<real> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
    auto n = make_node(a.shape(), std::move(out));
    NodePtr ap = a.node(), bp = b.node();
    record(n, {ap, bp}, [ap, bp](Node& self) {
        if (ap->requires_grad)
            for (std::size_t i = 0; i < self.val.size(); ++i)
                ap->grad[i] += self.grad[i] * bp->val[i];
        if (bp->requires_grad)
            for (std::size_t i = 0; i < self.val.size(); ++i)
                bp->grad[i] += self.grad[i] * ap->val[i];
    });
    return Tensor(n);
}

Tensor scale(const Tensor& x, real c) {
    std::vector<real> out(x.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = x.values()[i] * c;
    auto n = make_node(x.shape(), std::move(out));
    NodePtr xp = x.node();
    record(n, {xp}, [xp, c](Node& self) {
        for (std::size_t i = 0; i < self.val.size(); ++i) xp->grad[i] += self.grad[i] * c;
    });
    return Tensor(n);
}

// --- convolution ----------------------------------------------------------

namespace {

void im2col(const real* x, int C, int H, int W, int kh, int kw, int stride, int pad, int Ho,
            int Wo, real* cols) {
    // cols layout: [C*kh*kw, Ho*Wo]
    const std::size_t plane = std::size_t(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                real* dst = cols + (std::size_t(c) * kh * kw + ki * kw + kj) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int y = oy * stride - pad + ki;
                    if (y < 0 || y >= H) {
                        std::fill(dst + std::size_t(oy) * Wo, dst + std::size_t(oy + 1) * Wo, 0.0);
                        continue;
                    }
                    const real* src = x + (std::size_t(c) * H + y) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int xx = ox * stride - pad + kj;
                        dst[std::size_t(oy) * Wo + ox] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
                    }
                }
            }
        }
    }
}

void col2im_accum(const real* cols, int C, int H, int W, int kh, int kw, int stride, int pad,
                  int Ho, int Wo, real* dx) {
    const std::size_t plane = std::size_t(Ho) * Wo;
    for (int c = 0; c < C; ++c) {
        for (int ki = 0; ki < kh; ++ki) {
            for (int kj = 0; kj < kw; ++kj) {
                const real* src = cols + (std::size_t(c) * kh * kw + ki * kw + kj) * plane;
                for (int oy = 0; oy < Ho; ++oy) {
                    const int y = oy * stride - pad + ki;
                    if (y < 0 || y >= H) continue;
                    real* dst = dx + (std::size_t(c) * H + y) * W;
                    for (int ox = 0; ox < Wo; ++ox) {
                        const int xx = ox * stride - pad + kj;
                        if (xx >= 0 && xx < W) dst[xx] += src[std::size_t(oy) * Wo + ox];
                    }
                }
            }
        }
    }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    if (x.shape().size() != 3 || w.shape().size() != 4)
        throw std::invalid_argument("conv2d: expects x [C,H,W] and w [Cout,Cin,kh,kw]");
    const int Cin = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    const int Cout = w.shape()[0], kh = w.shape()[2], kw = w.shape()[3];
    if (w.shape()[1] != Cin) shape_error("conv2d", x.shape(), w.shape());
    if (b.defined() && (b.shape().size() != 1 || b.shape()[0] != Cout))
        shape_error("conv2d bias", b.shape(), {Cout});
    if (stride < 1) throw std::invalid_argument("conv2d: stride must be >= 1");
    const int Ho = (H + 2 * pad - kh) / stride + 1;
    const int Wo = (W + 2 * pad - kw) / stride + 1;
    if (Ho <= 0 || Wo <= 0) throw std::invalid_argument("conv2d: empty output");

    const int K = Cin * kh * kw;
    const std::size_t plane = std::size_t(Ho) * Wo;
    auto cols = std::make_shared<std::vector<real>>(std::size_t(K) * plane);
    im2col(x.values().data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo, cols->data());

    std::vector<real> out(std::size_t(Cout) * plane);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, Cout, int(plane), K, 1.0,
                w.values().data(), K, cols->data(), int(plane), 0.0, out.data(), int(plane));
    if (b.defined())
        for (int c = 0; c < Cout; ++c) {
            const real bias = b.values()[c];
            real* row = out.data() + std::size_t(c) * plane;
            for (std::size_t i = 0; i < plane; ++i) row[i] += bias;
        }

    auto n = make_node({Cout, Ho, Wo}, std::move(out));
    NodePtr xp = x.node(), wp = w.node(), bp = b.defined() ? b.node() : nullptr;
    record(n, {xp, wp, bp},
           [xp, wp, bp, cols, Cin, H, W, kh, kw, stride, pad, Ho, Wo, Cout, K](Node& self) {
               const std::size_t plane = std::size_t(Ho) * Wo;
               if (wp->requires_grad)
                   cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, Cout, K, int(plane), 1.0,
                               self.grad.data(), int(plane), cols->data(), int(plane), 1.0,
                               wp->grad.data(), K);
               if (bp && bp->requires_grad)
                   for (int c = 0; c < Cout; ++c) {
                       real s = 0.0;
                       const real* row = self.grad.data() + std::size_t(c) * plane;
                       for (std::size_t i = 0; i < plane; ++i) s += row[i];
                       bp->grad[c] += s;
                   }
               if (xp->requires_grad) {
                   std::vector<real> dcols(std::size_t(K) * plane);
                   cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, K, int(plane), Cout, 1.0,
                               wp->val.data(), K, self.grad.data(), int(plane), 0.0, dcols.data(),
                               int(plane));
                   col2im_accum(dcols.data(), Cin, H, W, kh, kw, stride, pad, Ho, Wo,
                                xp->grad.data());
               }
           });
    return Tensor(n);
}

// --- resampling / shape ----------------------------------------------------

Tensor upsample_nearest2(const Tensor& x) {
    if (x.shape().size() != 3) throw std::invalid_argument("upsample_nearest2: expects [C,H,W]");
    const int C = x.shape()[0], H = x.shape()[1], W = x.shape()[2];
    std::vector<real> out(std::size_t(C) * 4 * H * W);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y) {
            const real* src = x.values().data() + (std::size_t(c) * H + y / 2) * W;
            real* dst = out.data() + (std::size_t(c) * 2 * H + y) * 2 * W;
            for (int xx = 0; xx < 2 * W; ++xx) dst[xx] = src[xx / 2];
        }
    auto n = make_node({C, 2 * H, 2 * W}, std::move(out));
    NodePtr xp = x.node();
    record(n, {xp}, [xp, C, H, W](Node& self) {
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < 2 * H; ++y) {
                real* dst = xp->grad.data() + (std::size_t(c) * H + y / 2) * W;
                const real* src = self.grad.data() + (std::size_t(c) * 2 * H + y) * 2 * W;
                for (int xx = 0; xx < 2 * W; ++xx) dst[xx / 2] += src[xx];
            }
    });
    return Tensor(n);
}

Tensor avgpool2(const Tensor& x) {
    if (x.shape().size() != 3 || x.shape()[1] % 2 || x.shape()[2] % 2)
        throw std::invalid_argument("avgpool2: expects [C,2H,2W]");
    const int C = x.shape()[0], H = x.shape()[1] / 2, W = x.shape()[2] / 2;
    std::vector<real> out(std::size_t(C) * H * W);
    for (int c = 0; c < C; ++c)
        for (int y = 0; y < H; ++y)
            for (int xx = 0; xx < W; ++xx) {
                const real* base = x.values().data() + (std::size_t(c) * 2 * H + 2 * y) * 2 * W;
                out[(std::size_t(c) * H + y) * W + xx] =
                    0.25 * (base[2 * xx] + base[2 * xx + 1] + base[2 * W + 2 * xx] +
                            base[2 * W + 2 * xx + 1]);
            }
    auto n = make_node({C, H, W}, std::move(out));
    NodePtr xp = x.node();
    record(n, {xp}, [xp, C, H, W](Node& self) {
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    const real g = 0.25 * self.grad[(std::size_t(c) * H + y) * W + xx];
                    real* base = xp->grad.data() + (std::size_t(c) * 2 * H + 2 * y) * 2 * W;
                    base[2 * xx] += g;
                    base[2 * xx + 1] += g;
                    base[2 * W + 2 * xx] += g;
                    base[2 * W + 2 * xx + 1] += g;
                }
    });
    return Tensor(n);
}

Tensor reshape(const Tensor& x, std::vector<int> shape) {
    if (shape_numel(shape) != x.numel()) shape_error("reshape", x.shape(), shape);
    auto n = make_node(std::move(shape), x.values());
    NodePtr xp = x.node();
    record(n, {xp}, [xp](Node& self) {
        for (std::size_t i = 0; i < self.val.size(); ++i) xp->grad[i] += self.grad[i];
    });
    return Tensor(n);
}

Tensor permute(const Tensor& x, const std::vector<int>& dims) {
    const auto& s = x.shape();
    if (dims.size() != s.size()) throw std::invalid_argument("permute: rank mismatch");
    std::vector<int> seen(s.size(), 0), out_shape(s.size());
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (dims[i] < 0 || dims[i] >= int(s.size()) || seen[dims[i]]++)
            throw std::invalid_argument("permute: invalid dims");
        out_shape[i] = s[dims[i]];
    }
    // strides of input
    std::vector<std::size_t> in_stride(s.size(), 1);
    for (int i = int(s.size()) - 2; i >= 0; --i) in_stride[i] = in_stride[i + 1] * s[i + 1];
    std::vector<std::size_t> map(x.numel());
    std::vector<int> idx(out_shape.size(), 0);
    for (std::size_t o = 0; o < x.numel(); ++o) {
        std::size_t src = 0;
        for (std::size_t d = 0; d < dims.size(); ++d) src += idx[d] * in_stride[dims[d]];
        map[o] = src;
        for (int d = int(idx.size()) - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) break;
            idx[d] = 0;
        }
    }
    std::vector<real> out(x.numel());
    for (std::size_t o = 0; o < out.size(); ++o) out[o] = x.values()[map[o]];
    auto n = make_node(out_shape, std::move(out));
    NodePtr xp = x.node();
    auto map_ptr = std::make_shared<std::vector<std::size_t>>(std::move(map));
    record(n, {xp}, [xp, map_ptr](Node& self) {
        for (std::size_t o = 0; o < self.val.size(); ++o)
            xp->grad[(*map_ptr)[o]] += self.grad[o];
    });
    return Tensor(n);
}

Tensor reduce_sum(const Tensor& x) {
    real s = 0.0;
    for (real v : x.values()) s += v;
    auto n = make_node({1}, {s});
    NodePtr xp = x.node();
    record(n, {xp}, [xp](Node& self) {
        for (std::size_t i = 0; i < xp->grad.size(); ++i) xp->grad[i] += self.grad[0];
    });
    return Tensor(n);
}

Tensor reduce_mean(const Tensor& x) {
    const real inv = 1.0 / real(x.numel());
    real s = 0.0;
    for (real v : x.values()) s += v;
    auto n = make_node({1}, {s * inv});
    NodePtr xp = x.node();
    record(n, {xp}, [xp, inv](Node& self) {
        for (std::size_t i = 0; i < xp->grad.size(); ++i) xp->grad[i] += self.grad[0] * inv;
    });
    return Tensor(n);
}

Tensor make_op(std::vector<int> shape, std::vector<real> val, const std::vector<Tensor>& parents,
               std::function<void(Node&)> backward_fn) {
    if (shape_numel(shape) != val.size())
        throw std::invalid_argument("make_op: shape does not match values");
    auto n = make_node(std::move(shape), std::move(val));
    std::vector<NodePtr> ps;
    ps.reserve(parents.size());
    for (const auto& p : parents) ps.push_back(p.node());
    record(n, std::move(ps), std::move(backward_fn));
    return Tensor(n);
}

void sgd_step(Tensor& param, const std::vector<real>& grad, real lr, real momentum,
              real weight_decay, std::vector<real>& velocity) {
    auto& w = param.values();
    if (grad.size() != w.size()) throw std::invalid_argument("sgd_step: grad size mismatch");
    if (velocity.size() != w.size()) velocity.assign(w.size(), 0.0);
    for (std::size_t i = 0; i < w.size(); ++i) {
        velocity[i] = momentum * velocity[i] + grad[i] + weight_decay * w[i];
        w[i] -= lr * velocity[i];
    }
}

// --- checkpoint -------------------------------------------------------------

static constexpr char kMagic[8] = {'F', 'A', 'N', 'C', 'K', 'P', 'T', '\x01'};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries,
                     const std::string& extra_json) {
    nlohmann::json manifest;
    manifest["extra"] = extra_json.empty() ? nlohmann::json::object()
                                           : nlohmann::json::parse(extra_json);
    manifest["tensors"] = nlohmann::json::array();
    std::uint64_t offset = 0;
    for (const auto& e : entries) {
        manifest["tensors"].push_back({{"name", e.name},
                                       {"shape", e.shape},
                                       {"dtype", "f64"},
                                       {"offset", offset},
                                       {"nbytes", e.data.size() * sizeof(real)}});
        offset += e.data.size() * sizeof(real);
    }
    const std::string mstr = manifest.dump();
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("save_checkpoint: cannot open " + path);
    f.write(kMagic, 8);
    const std::uint64_t mlen = mstr.size();
    f.write(reinterpret_cast<const char*>(&mlen), 8);
    f.write(mstr.data(), std::streamsize(mstr.size()));
    for (const auto& e : entries)
        f.write(reinterpret_cast<const char*>(e.data.data()),
                std::streamsize(e.data.size() * sizeof(real)));
    if (!f) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

std::pair<std::vector<CheckpointEntry>, std::string> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("load_checkpoint: cannot open " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kMagic, 8) != 0)
        throw std::runtime_error("load_checkpoint: bad magic in " + path);
    std::uint64_t mlen = 0;
    f.read(reinterpret_cast<char*>(&mlen), 8);
    std::string mstr(mlen, '\0');
    f.read(mstr.data(), std::streamsize(mlen));
    if (!f) throw std::runtime_error("load_checkpoint: truncated manifest in " + path);
    const auto manifest = nlohmann::json::parse(mstr);

    const std::streampos payload = f.tellg();
    std::vector<CheckpointEntry> entries;
    for (const auto& t : manifest.at("tensors")) {
        CheckpointEntry e;
        e.name = t.at("name").get<std::string>();
        e.shape = t.at("shape").get<std::vector<int>>();
        if (t.at("dtype").get<std::string>() != "f64")
            throw std::runtime_error("load_checkpoint: unsupported dtype");
        const std::uint64_t nbytes = t.at("nbytes").get<std::uint64_t>();
        e.data.resize(nbytes / sizeof(real));
        f.seekg(payload + std::streampos(t.at("offset").get<std::uint64_t>()));
        f.read(reinterpret_cast<char*>(e.data.data()), std::streamsize(nbytes));
        if (!f) throw std::runtime_error("load_checkpoint: truncated payload in " + path);
        entries.push_back(std::move(e));
    }
    return {std::move(entries), manifest.at("extra").dump()};
}

}  // namespace fan
