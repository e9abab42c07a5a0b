#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <json.hpp>

#include "tabgrade/codec.hpp"

namespace tabgrade {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

// NaN/Inf in a forward or loss computation, or inconsistent shapes.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class GraphSharing { PerHead, PerLayerShared };
enum class GatingMode { AdditiveLog, MultiplicativeLog };
enum class TrainMode { Full, Light };

const char* to_string(GraphSharing s);
const char* to_string(GatingMode g);
const char* to_string(TrainMode m);
GraphSharing graph_sharing_from_string(const std::string& s);
GatingMode gating_from_string(const std::string& s);
TrainMode train_mode_from_string(const std::string& s);

struct ModelConfig {
    std::size_t n_layers = 2;
    std::size_t n_heads = 2;
    std::size_t model_dim = 64;
    std::size_t ffn_dim = 256;
    std::size_t max_seq_len = 256;
    std::size_t vocab_size = 0;
    GraphSharing graph_sharing = GraphSharing::PerHead;
    GatingMode gating = GatingMode::AdditiveLog;
    double epsilon = 1e-6;

    std::size_t head_dim() const { return model_dim / n_heads; }
    void validate() const;

    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& doc);

    bool operator==(const ModelConfig&) const = default;
};

struct Tensor {
    std::string name;
    Matrix value;
    bool graph = false;  // graph-module weight (trainable in Light mode)
};

struct LayerIndex {
    std::size_t ln1_g, ln1_b;
    std::size_t wq, bq, wk, bk, wv, bv, wo, bo;
    std::size_t ln2_g, ln2_b;
    std::size_t w_fc, b_fc, w_proj, b_proj;
    // Per head; under PerLayerShared every head points at the same tensors.
    std::vector<std::size_t> graph_w1, graph_w2;
};

struct ParamIndex {
    std::size_t tok_emb, pos_emb, lnf_g, lnf_b;
    std::vector<LayerIndex> layers;
};

struct ModelState {
    ModelConfig config;
    std::vector<Tensor> params;
    ParamIndex index;

    const Matrix& param(std::size_t i) const { return params[i].value; }
    std::size_t parameter_count() const;
    std::size_t graph_parameter_count() const;
};

// Builds the parameter layout; weights N(0, 0.02), biases 0, norm gains 1.
ModelState init_model(const ModelConfig& config, std::uint64_t seed);
// Rebuilds the index for an ordered tensor list (used by checkpoints).
ParamIndex build_index(const ModelConfig& config);
std::vector<Tensor> make_parameter_shapes(const ModelConfig& config);

// Attention internals retained per layer and head.
struct HeadTrace {
    Matrix scores;     // q k^T / sqrt(d_k); zero above the diagonal
    Matrix edges;      // w_ij in (0,1) for j <= i; zero above
    Matrix modulated;  // gated scores; -inf above the diagonal
    Matrix attention;  // row softmax over the causal prefix
};

struct LayerTrace {
    std::vector<HeadTrace> heads;
};

// w_ij = sigmoid(w2 . relu(w1 . [q_i; k_j])) for j <= i. Entries above the
// diagonal are zero. Adds the number of evaluated pairs to *edge_count.
Matrix graph_edge_weights(const Matrix& q, const Matrix& k, const Matrix& w1, const Matrix& w2,
                          std::size_t* edge_count = nullptr);

// AdditiveLog: a + log(w + eps); MultiplicativeLog: a * log(w + eps).
// Entries above the diagonal become -inf.
Matrix modulate_scores(const Matrix& scores, const Matrix& edges, double epsilon, GatingMode mode);

struct ForwardCache;

struct ForwardResult {
    Matrix logits;  // n x |V|
    std::vector<LayerTrace> traces;
    std::vector<TokenId> tokens;
    std::shared_ptr<const ForwardCache> cache;

    std::size_t length() const { return tokens.size(); }
};

ForwardResult transformer_forward(const ModelState& model, std::span<const TokenId> tokens);

// Causal self-attention of one layer on already-normalized input.
std::pair<Matrix, LayerTrace> causal_self_attention(const ModelState& model, std::size_t layer, const Matrix& x);

// Signs of every graph-module hidden unit (pq_i + pk_j > 0) from a forward
// pass, flattened. Two passes share a pattern iff no ReLU changed side.
std::vector<bool> graph_relu_pattern(const ModelState& model, const ForwardResult& forward);

struct Gradients {
    std::vector<Matrix> grads;  // aligned with ModelState::params

    static Gradients zeros_like(const ModelState& model);
    void set_zero();
};

// Upstream derivatives of the scalar objective w.r.t. the forward outputs.
struct LossSeeds {
    Matrix d_logits;                                // n x |V|, or empty
    std::vector<std::vector<Matrix>> d_edges;       // [layer][head] n x n, or empty
};

// Reverse-mode pass; accumulates into grads.
void backward(const ModelState& model, const ForwardResult& forward, const LossSeeds& seeds, Gradients& grads);

struct DecodeCache {
    std::size_t length = 0;
    std::vector<Matrix> keys;                      // per layer, max_seq_len x d
    std::vector<Matrix> values;                    // per layer
    std::vector<std::vector<Matrix>> graph_keys;   // per layer/head: k_j projected by the key half of w1
    std::size_t edge_evaluations = 0;

    static DecodeCache empty(const ModelConfig& config);
};

// Logits for the next position after appending new_token.
RowVector incremental_step(const ModelState& model, DecodeCache& cache, TokenId new_token);

}  // namespace tabgrade
