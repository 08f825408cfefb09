#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "stackunet/rng.hpp"
#include "stackunet/tensor.hpp"

namespace stackunet {

enum class LayerKind {
    Input,
    Conv,            // k x k, stride 1, zero padding k/2
    TransposedConv,  // 2 x 2, stride 2 (doubles H and W)
    UpsampleNearest, // x2
    MaxPool,         // 2 x 2, stride 2
    BatchNorm,
    Relu,
    Sigmoid,
    Concat,          // channel concatenation
    Add,             // elementwise sum of two inputs
};

const char* layer_kind_name(LayerKind k);

/// A trainable array with its gradient and Adam moments.
struct Param {
    std::string name;
    std::vector<int> shape;
    std::vector<float> value;
    std::vector<float> grad;
    std::vector<float> adam_m;
    std::vector<float> adam_v;

    size_t count() const { return value.size(); }
};

/// Non-trainable persistent state (batch-norm running statistics).
struct StateArray {
    std::string name;
    std::vector<int> shape;
    std::vector<float> value;
};

struct Node {
    LayerKind kind = LayerKind::Input;
    std::string name;
    int block = -1;  // cascade block index, -1 for cascade-level nodes
    std::vector<int> in;
    int in_channels = 0;
    int out_channels = 0;
    int ksize = 0;  // conv kernel size

    // indices into Graph::params / Graph::state, -1 when absent
    int p_weight = -1, p_bias = -1;
    int p_gamma = -1, p_beta = -1;
    int s_run_mean = -1, s_run_var = -1;

    float bn_eps = 1e-5f;
    float bn_momentum = 0.1f;

    // runtime buffers
    Tensor out_t;
    Tensor grad_t;
    std::vector<uint8_t> pool_arg;            // argmax codes, one per pooled output
    std::vector<float> bn_mean, bn_invstd;    // saved batch statistics
};

/// Static computation DAG. Nodes are appended in topological order; node 0 is the input.
class Graph {
public:
    int add_input(int channels);
    int add_conv(int src, int out_c, int ksize, const std::string& name, int block);
    int add_tconv(int src, int out_c, const std::string& name, int block);
    int add_upsample_nearest(int src, const std::string& name, int block);
    int add_maxpool(int src, const std::string& name, int block);
    int add_batchnorm(int src, const std::string& name, int block);
    int add_relu(int src, const std::string& name, int block);
    int add_sigmoid(int src, const std::string& name, int block);
    int add_concat(const std::vector<int>& srcs, const std::string& name, int block);
    int add_add(int a, int b, const std::string& name, int block);

    void set_output(int id);
    int output_id() const { return output_id_; }
    int input_id() const { return 0; }

    /// He-style fan-in scaled init for conv weights; BN gamma=1, beta=0, running (0, 1).
    void init_params(Rng& rng);

    /// Runs the graph. In inference mode intermediate buffers are released as soon as
    /// every consumer has read them; in training mode everything is retained for backward.
    const Tensor& forward(const Tensor& input, bool training);

    void zero_grads();

    /// Backpropagates d(loss)/d(output). Requires a preceding forward(..., true).
    void backward(const Tensor& dout);

    std::vector<Param>& params() { return params_; }
    const std::vector<Param>& params() const { return params_; }
    std::vector<StateArray>& state() { return state_; }
    const std::vector<StateArray>& state() const { return state_; }

    const std::vector<Node>& nodes() const { return nodes_; }
    Node& node(int id) { return nodes_[id]; }

    int64_t param_count() const;
    /// Trainable parameter count per block tag (block -1 entries keyed as -1).
    std::map<int, int64_t> param_count_by_block() const;

private:
    int append(Node n);
    void check_src(int src) const;

    std::vector<Node> nodes_;
    std::vector<Param> params_;
    std::vector<StateArray> state_;
    int output_id_ = -1;
    std::vector<int> consumer_count_;
    std::vector<float> scratch_;   // im2col buffer
    std::vector<float> scratch2_;  // backward column buffer
};

}  // namespace stackunet
