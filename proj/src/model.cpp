#include "tabgrade/model.hpp"

#include <cmath>
#include <limits>
#include <numbers>

#include "tabgrade/random.hpp"

namespace tabgrade {

namespace {

constexpr double kLayerNormEps = 1e-5;
constexpr double kInitStd = 0.02;
const double kGeluC = std::sqrt(2.0 / std::numbers::pi);

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double gelu(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    return 0.5 * x * (1.0 + std::tanh(u));
}

double gelu_grad(double x) {
    const double u = kGeluC * (x + 0.044715 * x * x * x);
    const double t = std::tanh(u);
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

struct NormCache {
    Matrix xhat;
    Eigen::VectorXd rstd;
};

Matrix layer_norm(const Matrix& x, const Matrix& gain, const Matrix& bias, NormCache* cache) {
    const auto n = x.rows();
    const auto d = x.cols();
    Matrix out(n, d);
    Matrix xhat(n, d);
    Eigen::VectorXd rstd(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mean = x.row(i).mean();
        const double var = (x.row(i).array() - mean).square().mean();
        rstd(i) = 1.0 / std::sqrt(var + kLayerNormEps);
        xhat.row(i) = (x.row(i).array() - mean) * rstd(i);
        out.row(i) = xhat.row(i).cwiseProduct(gain.row(0)) + bias.row(0);
    }
    if (cache) {
        cache->xhat = std::move(xhat);
        cache->rstd = std::move(rstd);
    }
    return out;
}

Matrix layer_norm_backward(const Matrix& dy, const Matrix& gain, const NormCache& cache, Matrix& d_gain,
                           Matrix& d_bias) {
    const auto n = dy.rows();
    const auto d = static_cast<double>(dy.cols());
    Matrix dx(n, dy.cols());
    d_gain.row(0) += (dy.cwiseProduct(cache.xhat)).colwise().sum();
    d_bias.row(0) += dy.colwise().sum();
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVector dxhat = dy.row(i).cwiseProduct(gain.row(0));
        const double mean_d = dxhat.sum() / d;
        const double mean_dx = dxhat.dot(cache.xhat.row(i)) / d;
        dx.row(i) = cache.rstd(i) * (dxhat.array() - mean_d - cache.xhat.row(i).array() * mean_dx);
    }
    return dx;
}

void softmax_causal_row(const Matrix& modulated, Matrix& attention, Eigen::Index i) {
    double mx = -std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j <= i; ++j) {
        mx = std::max(mx, modulated(i, j));
    }
    double sum = 0.0;
    for (Eigen::Index j = 0; j <= i; ++j) {
        const double e = std::exp(modulated(i, j) - mx);
        attention(i, j) = e;
        sum += e;
    }
    for (Eigen::Index j = 0; j <= i; ++j) {
        attention(i, j) /= sum;
    }
}

void check_finite(const Matrix& m, const char* what) {
    if (!m.allFinite()) {
        throw NumericError(std::string("non-finite values in ") + what);
    }
}

Eigen::Block<const Matrix> w1_query_half(const Matrix& w1) {
    return w1.block(0, 0, w1.rows(), w1.rows());
}

Eigen::Block<const Matrix> w1_key_half(const Matrix& w1) {
    return w1.block(0, w1.rows(), w1.rows(), w1.rows());
}

}  // namespace

// ---------------------------------------------------------------------------
// Enums and config

const char* to_string(GraphSharing s) {
    return s == GraphSharing::PerHead ? "per_head" : "per_layer_shared";
}

const char* to_string(GatingMode g) {
    return g == GatingMode::AdditiveLog ? "additive_log" : "multiplicative_log";
}

const char* to_string(TrainMode m) {
    return m == TrainMode::Full ? "full" : "light";
}

GraphSharing graph_sharing_from_string(const std::string& s) {
    if (s == "per_head") return GraphSharing::PerHead;
    if (s == "per_layer_shared") return GraphSharing::PerLayerShared;
    throw std::invalid_argument("unknown graph sharing '" + s + "'");
}

GatingMode gating_from_string(const std::string& s) {
    if (s == "additive_log") return GatingMode::AdditiveLog;
    if (s == "multiplicative_log") return GatingMode::MultiplicativeLog;
    throw std::invalid_argument("unknown gating mode '" + s + "'");
}

TrainMode train_mode_from_string(const std::string& s) {
    if (s == "full") return TrainMode::Full;
    if (s == "light") return TrainMode::Light;
    throw std::invalid_argument("unknown training mode '" + s + "'");
}

void ModelConfig::validate() const {
    if (n_layers == 0 || n_heads == 0 || model_dim == 0 || ffn_dim == 0 || max_seq_len == 0) {
        throw std::invalid_argument("model dimensions must be positive");
    }
    if (model_dim % n_heads != 0) {
        throw std::invalid_argument("model_dim must be divisible by n_heads");
    }
    if (!(epsilon > 0.0)) {
        throw std::invalid_argument("epsilon must be positive");
    }
    if (vocab_size == 0) {
        throw std::invalid_argument("vocab_size must be positive");
    }
}

nlohmann::json ModelConfig::to_json() const {
    return {{"n_layers", n_layers},
            {"n_heads", n_heads},
            {"model_dim", model_dim},
            {"ffn_dim", ffn_dim},
            {"max_seq_len", max_seq_len},
            {"vocab_size", vocab_size},
            {"graph_sharing", to_string(graph_sharing)},
            {"gating", to_string(gating)},
            {"epsilon", epsilon}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& doc) {
    ModelConfig c;
    c.n_layers = doc.at("n_layers").get<std::size_t>();
    c.n_heads = doc.at("n_heads").get<std::size_t>();
    c.model_dim = doc.at("model_dim").get<std::size_t>();
    c.ffn_dim = doc.at("ffn_dim").get<std::size_t>();
    c.max_seq_len = doc.at("max_seq_len").get<std::size_t>();
    c.vocab_size = doc.at("vocab_size").get<std::size_t>();
    c.graph_sharing = graph_sharing_from_string(doc.at("graph_sharing").get<std::string>());
    c.gating = gating_from_string(doc.at("gating").get<std::string>());
    c.epsilon = doc.at("epsilon").get<double>();
    c.validate();
    return c;
}

// ---------------------------------------------------------------------------
// Parameters

std::vector<Tensor> make_parameter_shapes(const ModelConfig& c) {
    c.validate();
    const auto d = static_cast<Eigen::Index>(c.model_dim);
    const auto f = static_cast<Eigen::Index>(c.ffn_dim);
    const auto dk = static_cast<Eigen::Index>(c.head_dim());
    std::vector<Tensor> t;
    auto add = [&](std::string name, Eigen::Index rows, Eigen::Index cols, bool graph = false) {
        t.push_back({std::move(name), Matrix::Zero(rows, cols), graph});
    };
    add("tok_emb", static_cast<Eigen::Index>(c.vocab_size), d);
    add("pos_emb", static_cast<Eigen::Index>(c.max_seq_len), d);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const std::string p = "layer" + std::to_string(l) + ".";
        add(p + "ln1.gain", 1, d);
        add(p + "ln1.bias", 1, d);
        add(p + "attn.wq", d, d);
        add(p + "attn.bq", 1, d);
        add(p + "attn.wk", d, d);
        add(p + "attn.bk", 1, d);
        add(p + "attn.wv", d, d);
        add(p + "attn.bv", 1, d);
        add(p + "attn.wo", d, d);
        add(p + "attn.bo", 1, d);
        add(p + "ln2.gain", 1, d);
        add(p + "ln2.bias", 1, d);
        add(p + "ffn.w_fc", d, f);
        add(p + "ffn.b_fc", 1, f);
        add(p + "ffn.w_proj", f, d);
        add(p + "ffn.b_proj", 1, d);
        const std::size_t modules = c.graph_sharing == GraphSharing::PerHead ? c.n_heads : 1;
        for (std::size_t h = 0; h < modules; ++h) {
            const std::string g = p + "graph" + std::to_string(h) + ".";
            add(g + "w1", dk, 2 * dk, true);
            add(g + "w2", 1, dk, true);
        }
    }
    add("lnf.gain", 1, d);
    add("lnf.bias", 1, d);
    return t;
}

ParamIndex build_index(const ModelConfig& c) {
    ParamIndex idx;
    std::size_t k = 0;
    idx.tok_emb = k++;
    idx.pos_emb = k++;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        LayerIndex li{};
        li.ln1_g = k++;
        li.ln1_b = k++;
        li.wq = k++;
        li.bq = k++;
        li.wk = k++;
        li.bk = k++;
        li.wv = k++;
        li.bv = k++;
        li.wo = k++;
        li.bo = k++;
        li.ln2_g = k++;
        li.ln2_b = k++;
        li.w_fc = k++;
        li.b_fc = k++;
        li.w_proj = k++;
        li.b_proj = k++;
        if (c.graph_sharing == GraphSharing::PerHead) {
            for (std::size_t h = 0; h < c.n_heads; ++h) {
                li.graph_w1.push_back(k++);
                li.graph_w2.push_back(k++);
            }
        } else {
            const std::size_t w1 = k++;
            const std::size_t w2 = k++;
            li.graph_w1.assign(c.n_heads, w1);
            li.graph_w2.assign(c.n_heads, w2);
        }
        idx.layers.push_back(std::move(li));
    }
    idx.lnf_g = k++;
    idx.lnf_b = k++;
    return idx;
}

ModelState init_model(const ModelConfig& config, std::uint64_t seed) {
    ModelState m;
    m.config = config;
    m.params = make_parameter_shapes(config);
    m.index = build_index(config);
    Rng rng(seed);
    for (auto& t : m.params) {
        const bool is_gain = t.name.ends_with(".gain");
        const bool is_bias = t.name.ends_with(".bias") || t.name.ends_with(".bq") || t.name.ends_with(".bk") ||
                             t.name.ends_with(".bv") || t.name.ends_with(".bo") || t.name.ends_with(".b_fc") ||
                             t.name.ends_with(".b_proj");
        if (is_gain) {
            t.value.setOnes();
        } else if (!is_bias) {
            for (Eigen::Index i = 0; i < t.value.size(); ++i) {
                t.value.data()[i] = kInitStd * rng.normal();
            }
        }
    }
    return m;
}

std::size_t ModelState::parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : params) n += static_cast<std::size_t>(t.value.size());
    return n;
}

std::size_t ModelState::graph_parameter_count() const {
    std::size_t n = 0;
    for (const auto& t : params) {
        if (t.graph) n += static_cast<std::size_t>(t.value.size());
    }
    return n;
}

Gradients Gradients::zeros_like(const ModelState& model) {
    Gradients g;
    g.grads.reserve(model.params.size());
    for (const auto& t : model.params) {
        g.grads.push_back(Matrix::Zero(t.value.rows(), t.value.cols()));
    }
    return g;
}

void Gradients::set_zero() {
    for (auto& g : grads) g.setZero();
}

// ---------------------------------------------------------------------------
// Graph module and gating

Matrix graph_edge_weights(const Matrix& q, const Matrix& k, const Matrix& w1, const Matrix& w2,
                          std::size_t* edge_count) {
    const auto n = q.rows();
    const auto dk = q.cols();
    if (k.rows() != n || k.cols() != dk || w1.rows() != dk || w1.cols() != 2 * dk || w2.rows() != 1 ||
        w2.cols() != dk) {
        throw NumericError("graph_edge_weights: shape mismatch");
    }
    const Matrix pq = q * w1_query_half(w1).transpose();
    const Matrix pk = k * w1_key_half(w1).transpose();
    Matrix w = Matrix::Zero(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
        for (Eigen::Index j = 0; j <= i; ++j) {
            const double s = (pq.row(i) + pk.row(j)).cwiseMax(0.0).dot(w2.row(0));
            w(i, j) = sigmoid(s);
        }
    }
    if (edge_count) {
        *edge_count += static_cast<std::size_t>(n * (n + 1) / 2);
    }
    return w;
}

Matrix modulate_scores(const Matrix& scores, const Matrix& edges, double epsilon, GatingMode mode) {
    if (scores.rows() != edges.rows() || scores.cols() != edges.cols()) {
        throw NumericError("modulate_scores: shape mismatch");
    }
    if (!(epsilon > 0.0)) {
        throw NumericError("modulate_scores: epsilon must be positive");
    }
    Matrix out(scores.rows(), scores.cols());
    out.setConstant(-std::numeric_limits<double>::infinity());
    for (Eigen::Index i = 0; i < scores.rows(); ++i) {
        for (Eigen::Index j = 0; j <= i && j < scores.cols(); ++j) {
            const double g = std::log(edges(i, j) + epsilon);
            out(i, j) = mode == GatingMode::AdditiveLog ? scores(i, j) + g : scores(i, j) * g;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Forward

struct LayerCache {
    Matrix x_in;
    NormCache ln1;
    Matrix h1, q, k, v;
    Matrix attn_cat;
    Matrix x_mid;
    NormCache ln2;
    Matrix h2, ff_pre, ff_act;
};

struct ForwardCache {
    std::vector<LayerCache> layers;
    NormCache lnf;
    Matrix hf;
};

namespace {

LayerTrace attention_heads(const ModelState& model, const LayerIndex& li, const Matrix& q, const Matrix& k,
                           const Matrix& v, Matrix& attn_cat) {
    const auto& c = model.config;
    const auto n = q.rows();
    const auto dk = static_cast<Eigen::Index>(c.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    LayerTrace trace;
    trace.heads.resize(c.n_heads);
    attn_cat.resize(n, static_cast<Eigen::Index>(c.model_dim));
    for (std::size_t h = 0; h < c.n_heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dk;
        const Matrix qh = q.middleCols(off, dk);
        const Matrix kh = k.middleCols(off, dk);
        HeadTrace& ht = trace.heads[h];
        ht.scores = (qh * kh.transpose()) * scale;
        ht.scores.triangularView<Eigen::StrictlyUpper>().setZero();
        ht.edges = graph_edge_weights(qh, kh, model.param(li.graph_w1[h]), model.param(li.graph_w2[h]));
        ht.modulated = modulate_scores(ht.scores, ht.edges, c.epsilon, c.gating);
        ht.attention = Matrix::Zero(n, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            softmax_causal_row(ht.modulated, ht.attention, i);
        }
        attn_cat.middleCols(off, dk) = ht.attention * v.middleCols(off, dk);
    }
    return trace;
}

}  // namespace

std::pair<Matrix, LayerTrace> causal_self_attention(const ModelState& model, std::size_t layer, const Matrix& x) {
    const auto& li = model.index.layers.at(layer);
    if (static_cast<std::size_t>(x.rows()) > model.config.max_seq_len) {
        throw NumericError("sequence longer than max_seq_len");
    }
    const Matrix q = (x * model.param(li.wq)).rowwise() + model.param(li.bq).row(0);
    const Matrix k = (x * model.param(li.wk)).rowwise() + model.param(li.bk).row(0);
    const Matrix v = (x * model.param(li.wv)).rowwise() + model.param(li.bv).row(0);
    Matrix cat;
    LayerTrace trace = attention_heads(model, li, q, k, v, cat);
    Matrix y = (cat * model.param(li.wo)).rowwise() + model.param(li.bo).row(0);
    check_finite(y, "attention output");
    return {std::move(y), std::move(trace)};
}

ForwardResult transformer_forward(const ModelState& model, std::span<const TokenId> tokens) {
    const auto& c = model.config;
    const auto n = static_cast<Eigen::Index>(tokens.size());
    if (tokens.empty()) {
        throw NumericError("empty token sequence");
    }
    if (tokens.size() > c.max_seq_len) {
        throw NumericError("sequence of length " + std::to_string(tokens.size()) + " exceeds max_seq_len " +
                           std::to_string(c.max_seq_len));
    }
    auto cache = std::make_shared<ForwardCache>();
    ForwardResult out;
    out.tokens.assign(tokens.begin(), tokens.end());

    const Matrix& tok = model.param(model.index.tok_emb);
    const Matrix& pos = model.param(model.index.pos_emb);
    Matrix x(n, static_cast<Eigen::Index>(c.model_dim));
    for (Eigen::Index t = 0; t < n; ++t) {
        const auto id = tokens[static_cast<std::size_t>(t)];
        if (id < 0 || static_cast<std::size_t>(id) >= c.vocab_size) {
            throw NumericError("token id " + std::to_string(id) + " out of range");
        }
        x.row(t) = tok.row(id) + pos.row(t);
    }

    cache->layers.resize(c.n_layers);
    out.traces.reserve(c.n_layers);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& li = model.index.layers[l];
        LayerCache& lc = cache->layers[l];
        lc.x_in = x;
        lc.h1 = layer_norm(x, model.param(li.ln1_g), model.param(li.ln1_b), &lc.ln1);
        lc.q = (lc.h1 * model.param(li.wq)).rowwise() + model.param(li.bq).row(0);
        lc.k = (lc.h1 * model.param(li.wk)).rowwise() + model.param(li.bk).row(0);
        lc.v = (lc.h1 * model.param(li.wv)).rowwise() + model.param(li.bv).row(0);
        out.traces.push_back(attention_heads(model, li, lc.q, lc.k, lc.v, lc.attn_cat));
        x += (lc.attn_cat * model.param(li.wo)).rowwise() + model.param(li.bo).row(0);
        lc.x_mid = x;
        lc.h2 = layer_norm(x, model.param(li.ln2_g), model.param(li.ln2_b), &lc.ln2);
        lc.ff_pre = (lc.h2 * model.param(li.w_fc)).rowwise() + model.param(li.b_fc).row(0);
        lc.ff_act = lc.ff_pre.unaryExpr(&gelu);
        x += (lc.ff_act * model.param(li.w_proj)).rowwise() + model.param(li.b_proj).row(0);
    }
    cache->hf = layer_norm(x, model.param(model.index.lnf_g), model.param(model.index.lnf_b), &cache->lnf);
    out.logits = cache->hf * tok.transpose();
    check_finite(out.logits, "logits");
    out.cache = std::move(cache);
    return out;
}

// ---------------------------------------------------------------------------
// Backward

std::vector<bool> graph_relu_pattern(const ModelState& model, const ForwardResult& forward) {
    if (!forward.cache) throw NumericError("graph_relu_pattern: forward result has no cache");
    const auto& c = model.config;
    const auto dk = static_cast<Eigen::Index>(c.head_dim());
    std::vector<bool> out;
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& lc = forward.cache->layers[l];
        const auto& li = model.index.layers[l];
        const auto n = lc.q.rows();
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * dk;
            const Matrix& w1 = model.param(li.graph_w1[h]);
            const Matrix pq = lc.q.middleCols(off, dk) * w1_query_half(w1).transpose();
            const Matrix pk = lc.k.middleCols(off, dk) * w1_key_half(w1).transpose();
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = 0; j <= i; ++j) {
                    for (Eigen::Index u = 0; u < dk; ++u) out.push_back(pq(i, u) + pk(j, u) > 0.0);
                }
            }
        }
    }
    return out;
}

void backward(const ModelState& model, const ForwardResult& fwd, const LossSeeds& seeds, Gradients& grads) {
    if (!fwd.cache) {
        throw NumericError("backward called without a recorded forward pass");
    }
    const auto& c = model.config;
    const auto& cache = *fwd.cache;
    const auto n = static_cast<Eigen::Index>(fwd.length());
    const auto d = static_cast<Eigen::Index>(c.model_dim);
    const auto dk = static_cast<Eigen::Index>(c.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    auto& g = grads.grads;
    const auto& idx = model.index;
    const Matrix& tok = model.param(idx.tok_emb);

    Matrix dx = Matrix::Zero(n, d);
    if (seeds.d_logits.size() > 0) {
        if (seeds.d_logits.rows() != n || seeds.d_logits.cols() != tok.rows()) {
            throw NumericError("logit seed shape mismatch");
        }
        const Matrix dhf = seeds.d_logits * tok;
        g[idx.tok_emb] += seeds.d_logits.transpose() * cache.hf;
        dx = layer_norm_backward(dhf, model.param(idx.lnf_g), cache.lnf, g[idx.lnf_g], g[idx.lnf_b]);
    }
    const bool edge_seeds = !seeds.d_edges.empty();

    for (std::size_t l = c.n_layers; l-- > 0;) {
        const auto& li = idx.layers[l];
        const LayerCache& lc = cache.layers[l];
        const LayerTrace& tr = fwd.traces[l];

        // Feed-forward block.
        {
            const Matrix& dm = dx;
            g[li.w_proj] += lc.ff_act.transpose() * dm;
            g[li.b_proj].row(0) += dm.colwise().sum();
            Matrix dact = dm * model.param(li.w_proj).transpose();
            const Matrix dpre = dact.cwiseProduct(lc.ff_pre.unaryExpr(&gelu_grad));
            g[li.w_fc] += lc.h2.transpose() * dpre;
            g[li.b_fc].row(0) += dpre.colwise().sum();
            const Matrix dh2 = dpre * model.param(li.w_fc).transpose();
            dx += layer_norm_backward(dh2, model.param(li.ln2_g), lc.ln2, g[li.ln2_g], g[li.ln2_b]);
        }

        // Attention block.
        g[li.wo] += lc.attn_cat.transpose() * dx;
        g[li.bo].row(0) += dx.colwise().sum();
        const Matrix dcat = dx * model.param(li.wo).transpose();
        Matrix dq = Matrix::Zero(n, d);
        Matrix dk_all = Matrix::Zero(n, d);
        Matrix dv = Matrix::Zero(n, d);
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * dk;
            const HeadTrace& ht = tr.heads[h];
            const Matrix qh = lc.q.middleCols(off, dk);
            const Matrix kh = lc.k.middleCols(off, dk);
            const Matrix vh = lc.v.middleCols(off, dk);
            const Matrix doh = dcat.middleCols(off, dk);

            dv.middleCols(off, dk) = ht.attention.transpose() * doh;
            const Matrix dp = doh * vh.transpose();

            Matrix dscore = Matrix::Zero(n, n);
            Matrix dedge = Matrix::Zero(n, n);
            for (Eigen::Index i = 0; i < n; ++i) {
                double dot = 0.0;
                for (Eigen::Index j = 0; j <= i; ++j) dot += ht.attention(i, j) * dp(i, j);
                for (Eigen::Index j = 0; j <= i; ++j) {
                    const double dmod = ht.attention(i, j) * (dp(i, j) - dot);
                    const double w = ht.edges(i, j);
                    if (c.gating == GatingMode::AdditiveLog) {
                        dscore(i, j) = dmod;
                        dedge(i, j) = dmod / (w + c.epsilon);
                    } else {
                        dscore(i, j) = dmod * std::log(w + c.epsilon);
                        dedge(i, j) = dmod * ht.scores(i, j) / (w + c.epsilon);
                    }
                }
            }
            if (edge_seeds) {
                const Matrix& seed = seeds.d_edges.at(l).at(h);
                if (seed.size() > 0) {
                    dedge += seed.triangularView<Eigen::Lower>().toDenseMatrix();
                }
            }

            // Graph module: w = sigmoid(w2 . relu(pq_i + pk_j)).
            const Matrix& w1 = model.param(li.graph_w1[h]);
            const Matrix& w2 = model.param(li.graph_w2[h]);
            const Matrix pq = qh * w1_query_half(w1).transpose();
            const Matrix pk = kh * w1_key_half(w1).transpose();
            Matrix dpq = Matrix::Zero(n, dk);
            Matrix dpk = Matrix::Zero(n, dk);
            RowVector dw2 = RowVector::Zero(dk);
            for (Eigen::Index i = 0; i < n; ++i) {
                for (Eigen::Index j = 0; j <= i; ++j) {
                    const double w = ht.edges(i, j);
                    const double ds = dedge(i, j) * w * (1.0 - w);
                    if (ds == 0.0) continue;
                    const RowVector pre = pq.row(i) + pk.row(j);
                    const RowVector z = pre.cwiseMax(0.0);
                    dw2 += ds * z;
                    const RowVector dz = (pre.array() > 0.0).select(ds * w2.row(0).array(), 0.0);
                    dpq.row(i) += dz;
                    dpk.row(j) += dz;
                }
            }
            g[li.graph_w2[h]].row(0) += dw2;
            g[li.graph_w1[h]].leftCols(dk) += dpq.transpose() * qh;
            g[li.graph_w1[h]].rightCols(dk) += dpk.transpose() * kh;

            Matrix dqh = dpq * w1_query_half(w1);
            Matrix dkh = dpk * w1_key_half(w1);
            dqh += (dscore * kh) * scale;
            dkh += (dscore.transpose() * qh) * scale;
            dq.middleCols(off, dk) = dqh;
            dk_all.middleCols(off, dk) = dkh;
        }
        g[li.wq] += lc.h1.transpose() * dq;
        g[li.bq].row(0) += dq.colwise().sum();
        g[li.wk] += lc.h1.transpose() * dk_all;
        g[li.bk].row(0) += dk_all.colwise().sum();
        g[li.wv] += lc.h1.transpose() * dv;
        g[li.bv].row(0) += dv.colwise().sum();
        const Matrix dh1 = dq * model.param(li.wq).transpose() + dk_all * model.param(li.wk).transpose() +
                           dv * model.param(li.wv).transpose();
        dx += layer_norm_backward(dh1, model.param(li.ln1_g), lc.ln1, g[li.ln1_g], g[li.ln1_b]);
    }

    for (Eigen::Index t = 0; t < n; ++t) {
        g[idx.tok_emb].row(fwd.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
        g[idx.pos_emb].row(t) += dx.row(t);
    }
}

// ---------------------------------------------------------------------------
// Incremental decoding

DecodeCache DecodeCache::empty(const ModelConfig& c) {
    DecodeCache cache;
    const auto rows = static_cast<Eigen::Index>(c.max_seq_len);
    const auto d = static_cast<Eigen::Index>(c.model_dim);
    const auto dk = static_cast<Eigen::Index>(c.head_dim());
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        cache.keys.push_back(Matrix::Zero(rows, d));
        cache.values.push_back(Matrix::Zero(rows, d));
        cache.graph_keys.emplace_back(c.n_heads, Matrix::Zero(rows, dk));
    }
    return cache;
}

RowVector incremental_step(const ModelState& model, DecodeCache& cache, TokenId new_token) {
    const auto& c = model.config;
    if (cache.keys.size() != c.n_layers) {
        throw NumericError("decode cache does not match the model");
    }
    if (cache.length >= c.max_seq_len) {
        throw NumericError("decode cache is full");
    }
    if (new_token < 0 || static_cast<std::size_t>(new_token) >= c.vocab_size) {
        throw NumericError("token id out of range");
    }
    const auto pos = static_cast<Eigen::Index>(cache.length);
    const auto dk = static_cast<Eigen::Index>(c.head_dim());
    const double scale = 1.0 / std::sqrt(static_cast<double>(dk));
    const auto& idx = model.index;

    Matrix x = model.param(idx.tok_emb).row(new_token) + model.param(idx.pos_emb).row(pos);
    for (std::size_t l = 0; l < c.n_layers; ++l) {
        const auto& li = idx.layers[l];
        const Matrix h1 = layer_norm(x, model.param(li.ln1_g), model.param(li.ln1_b), nullptr);
        const Matrix q = h1 * model.param(li.wq) + model.param(li.bq);
        cache.keys[l].row(pos) = h1 * model.param(li.wk) + model.param(li.bk);
        cache.values[l].row(pos) = h1 * model.param(li.wv) + model.param(li.bv);
        Matrix cat(1, static_cast<Eigen::Index>(c.model_dim));
        for (std::size_t h = 0; h < c.n_heads; ++h) {
            const auto off = static_cast<Eigen::Index>(h) * dk;
            const Matrix& w1 = model.param(li.graph_w1[h]);
            const Matrix& w2 = model.param(li.graph_w2[h]);
            const Matrix qh = q.middleCols(off, dk);
            Matrix& gk = cache.graph_keys[l][h];
            gk.row(pos) = cache.keys[l].block(pos, off, 1, dk) * w1_key_half(w1).transpose();
            const RowVector pq = qh * w1_query_half(w1).transpose();

            RowVector mod(pos + 1);
            for (Eigen::Index j = 0; j <= pos; ++j) {
                const double a = qh.row(0).dot(cache.keys[l].block(j, off, 1, dk).row(0)) * scale;
                const double w = sigmoid((pq + gk.row(j)).cwiseMax(0.0).dot(w2.row(0)));
                const double gate = std::log(w + c.epsilon);
                mod(j) = c.gating == GatingMode::AdditiveLog ? a + gate : a * gate;
            }
            cache.edge_evaluations += static_cast<std::size_t>(pos + 1);
            const double mx = mod.maxCoeff();
            RowVector p = (mod.array() - mx).exp();
            p /= p.sum();
            cat.middleCols(off, dk) = p * cache.values[l].block(0, off, pos + 1, dk);
        }
        x += cat * model.param(li.wo) + model.param(li.bo);
        const Matrix h2 = layer_norm(x, model.param(li.ln2_g), model.param(li.ln2_b), nullptr);
        const Matrix act = (h2 * model.param(li.w_fc) + model.param(li.b_fc)).unaryExpr(&gelu);
        x += act * model.param(li.w_proj) + model.param(li.b_proj);
    }
    const Matrix hf = layer_norm(x, model.param(idx.lnf_g), model.param(idx.lnf_b), nullptr);
    RowVector logits = hf * model.param(idx.tok_emb).transpose();
    if (!logits.allFinite()) {
        throw NumericError("non-finite values in logits");
    }
    ++cache.length;
    return logits;
}

}  // namespace tabgrade
