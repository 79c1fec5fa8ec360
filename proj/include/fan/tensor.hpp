#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace fan {

using real = double;

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of an eagerly built reverse-mode graph. `backward_fn` scatters
// this node's gradient into its parents' gradient buffers.
struct Node {
    std::vector<int> shape;
    std::vector<real> val;
    std::vector<real> grad;  // sized lazily; persists on leaves for accumulation
    bool requires_grad = false;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward_fn;

    std::size_t numel() const { return val.size(); }
    void ensure_grad();  // allocate zeroed gradient buffer if absent
};

// Value-semantics handle to a graph node. Copies share the node.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(NodePtr n) : n_(std::move(n)) {}

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<real> data,
                            bool requires_grad = false);
    static Tensor scalar(real v);

    bool defined() const { return n_ != nullptr; }
    const std::vector<int>& shape() const { return n_->shape; }
    std::size_t numel() const { return n_->val.size(); }
    std::vector<real>& values() { return n_->val; }
    const std::vector<real>& values() const { return n_->val; }
    std::vector<real>& grad();
    bool requires_grad() const { return n_ && n_->requires_grad; }
    real item() const;

    void zero_grad();
    // Reverse-mode accumulation from a scalar root. Leaf gradients are
    // accumulated, not overwritten, so repeated backwards sum.
    void backward();

    NodePtr node() const { return n_; }

private:
    NodePtr n_;
};

// When disabled, ops run forward-only and record no graph (inference mode).
class GradMode {
public:
    static bool enabled();
    static void set(bool on);
};
struct NoGradGuard {
    NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
    ~NoGradGuard() { GradMode::set(prev_); }
private:
    bool prev_;
};

// --- core op set ------------------------------------------------------

// x: [Cin,H,W]; w: [Cout,Cin,kh,kw]; optional bias [Cout]; zero padding.
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);      // same shape
Tensor mul(const Tensor& a, const Tensor& b);      // same shape, elementwise
Tensor scale(const Tensor& x, real c);
Tensor upsample_nearest2(const Tensor& x);         // [C,H,W] -> [C,2H,2W]
Tensor avgpool2(const Tensor& x);                  // [C,2H,2W] -> [C,H,W], 2x2 mean
Tensor reshape(const Tensor& x, std::vector<int> shape);
Tensor permute(const Tensor& x, const std::vector<int>& dims);
Tensor reduce_sum(const Tensor& x);
Tensor reduce_mean(const Tensor& x);

// Hook for fused ops defined outside this module: wraps precomputed forward
// values into a graph node with a caller-supplied backward closure.
Tensor make_op(std::vector<int> shape, std::vector<real> val, const std::vector<Tensor>& parents,
               std::function<void(Node&)> backward_fn);

// v <- momentum*v + g + weight_decay*w ; w <- w - lr*v
void sgd_step(Tensor& param, const std::vector<real>& grad, real lr, real momentum,
              real weight_decay, std::vector<real>& velocity);

// --- checkpoint container ----------------------------------------------
// Flat binary file: 8-byte magic "FANCKPT\x01", little-endian u64 manifest
// length, JSON manifest (tensor names/shapes/dtype/offsets plus an arbitrary
// "extra" object), then raw little-endian f64 payload.

struct CheckpointEntry {
    std::string name;
    std::vector<int> shape;
    std::vector<real> data;
};

void save_checkpoint(const std::string& path, const std::vector<CheckpointEntry>& entries,
                     const std::string& extra_json);
std::pair<std::vector<CheckpointEntry>, std::string> load_checkpoint(const std::string& path);

}  // namespace fan
