#pragma once

// Toy-scale long-horizon forecaster: ProbSparse self-attention encoder with
// distilling between blocks, and a generative decoder that fills a
// zero-padded horizon in a single pass.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iterator>
#include <limits>
#include <numbers>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "gridpatch/data.hpp"
#include "gridpatch/graph.hpp"
#include "gridpatch/params.hpp"

namespace gridpatch {

class ForecastError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// ProbSparse attention

/// Number of dominant queries (and sampled keys) for a sequence of length L:
/// ceil(factor * ln L), capped at L.
inline std::size_t dominant_count(std::size_t length, double factor = 5.0) {
    if (length == 0) return 0;
    const auto u = static_cast<std::size_t>(std::ceil(factor * std::log(static_cast<double>(length))));
    return std::clamp<std::size_t>(u, 1, length);
}

/// Max-minus-mean of scaled dot products over a seeded key subsample. With
/// sample_size equal to the key count every key is used in index order.
inline std::vector<double> sparsity_scores(const Tensor& q, const Tensor& k, std::size_t sample_size,
                                           std::uint64_t seed = 0) {
    if (q.rank() != 2 || k.rank() != 2 || q.dim(0) == 0 || k.dim(0) == 0)
        throw ShapeError("sparsity_scores: Q and K must be non-empty matrices");
    if (q.dim(1) != k.dim(1))
        throw ShapeError("sparsity_scores: key width " + std::to_string(k.dim(1)) + " != query width " +
                         std::to_string(q.dim(1)));
    const std::size_t lk = k.dim(0), d = q.dim(1);
    if (sample_size == 0 || sample_size > lk)
        throw std::invalid_argument("sparsity_scores: sample size must be in [1, key count]");

    std::vector<std::size_t> keys(lk);
    for (std::size_t j = 0; j < lk; ++j) keys[j] = j;
    if (sample_size < lk) {
        std::vector<std::size_t> picked;
        std::mt19937_64 rng(seed);
        std::sample(keys.begin(), keys.end(), std::back_inserter(picked), sample_size, rng);
        keys = std::move(picked);
    }
    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    std::vector<double> scores(q.dim(0));
    for (std::size_t i = 0; i < q.dim(0); ++i) {
        double mx = -std::numeric_limits<double>::infinity(), total = 0.0;
        for (std::size_t j : keys) {
            double dot = 0.0;
            for (std::size_t c = 0; c < d; ++c) dot += q(i, c) * k(j, c);
            dot *= scale;
            mx = std::max(mx, dot);
            total += dot;
        }
        scores[i] = mx - total / static_cast<double>(keys.size());
    }
    return scores;
}

/// Indices of the u highest scores, ascending. Ties go to the lower index.
inline std::vector<std::size_t> top_u(const std::vector<double>& scores, std::size_t u) {
    if (u == 0 || u > scores.size())
        throw std::invalid_argument("top_u: u = " + std::to_string(u) + " outside [1, " +
                                    std::to_string(scores.size()) + "]");
    std::vector<std::size_t> order(scores.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    order.resize(u);
    std::sort(order.begin(), order.end());
    return order;
}

/// Single-head ProbSparse attention recorded on a graph. Selected query rows
/// get full softmax attention; the rest are filled with the mean of V.
inline NodeId probsparse_node(Graph& g, NodeId q, NodeId k, NodeId v, std::size_t u, std::size_t sample_size,
                              std::uint64_t seed) {
    const Tensor& qv = g.value(q);
    const Tensor& kv = g.value(k);
    if (u == 0 || u > qv.dim(0))
        throw std::invalid_argument("probsparse_attention: u = " + std::to_string(u) + " outside [1, " +
                                    std::to_string(qv.dim(0)) + "]");
    const std::size_t lq = qv.dim(0), lk = kv.dim(0);
    const double scale = 1.0 / std::sqrt(static_cast<double>(qv.dim(1)));

    std::vector<std::size_t> chosen;
    if (u == lq) {
        chosen.resize(lq);
        for (std::size_t i = 0; i < lq; ++i) chosen[i] = i;
    } else {
        chosen = top_u(sparsity_scores(qv, kv, sample_size, seed), u);
    }
    const NodeId q_top = u == lq ? q : g.gather_rows(q, chosen);
    const NodeId weights = g.softmax(g.scale(g.matmul(q_top, g.transpose(k)), scale));
    const NodeId active = g.matmul(weights, v);
    if (u == lq) return active;

    NodeId lazy = g.mean_rows(v);
    if (lq != lk) lazy = g.gather_rows(lazy, std::vector<std::size_t>(lq, 0));
    return g.scatter_rows(lazy, active, chosen);
}

/// Value-level ProbSparse attention.
inline Tensor probsparse_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t u,
                                   std::size_t sample_size = 0, std::uint64_t seed = 0) {
    if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 || k.dim(0) != v.dim(0) || q.dim(1) != k.dim(1))
        throw ShapeError("probsparse_attention: incompatible shapes Q " + to_string(q.shape()) + " K " +
                         to_string(k.shape()) + " V " + to_string(v.shape()));
    Graph g;
    const NodeId out = probsparse_node(g, g.constant(q), g.constant(k), g.constant(v), u,
                                       sample_size == 0 ? k.dim(0) : sample_size, seed);
    return g.value(out);
}

// ---------------------------------------------------------------------------
// Model

struct ForecastConfig {
    std::size_t num_units = 18;
    std::size_t d_model = 32;
    std::size_t heads = 2;
    std::size_t encoder_layers = 2;
    std::size_t decoder_layers = 1;
    std::size_t ff_dim = 64;
    std::size_t input_len = 56;
    std::size_t decoder_len = 28;
    std::size_t horizon = 15;
    double sample_factor = 5.0;
    std::uint64_t seed = 1;
};

struct PredictionSnapshot {
    std::size_t issue_time = 0;
    Tensor values;  // horizon x n_new, MW, clipped at 0
};

class ForecastModel {
public:
    ForecastModel() = default;
    explicit ForecastModel(const ForecastConfig& config) : config_(config) {
        validate_config();
        input_mean_.assign(config_.num_units, 0.0);
        input_std_.assign(config_.num_units, 1.0);
        initialize();
    }

    const ForecastConfig& config() const noexcept { return config_; }
    ParameterSet& params() noexcept { return params_; }
    const ParameterSet& params() const noexcept { return params_; }
    bool trained() const noexcept { return trained_; }
    void set_trained(bool t) noexcept { trained_ = t; }

    const std::vector<double>& input_mean() const noexcept { return input_mean_; }
    const std::vector<double>& input_std() const noexcept { return input_std_; }
    void set_normalization(std::vector<double> mean, std::vector<double> stdev) {
        if (mean.size() != config_.num_units || stdev.size() != config_.num_units)
            throw ShapeError("forecast: normalization vectors must have one entry per unit");
        for (double s : stdev)
            if (!(s > 0.0)) throw std::invalid_argument("forecast: normalization scale must be positive");
        input_mean_ = std::move(mean);
        input_std_ = std::move(stdev);
    }

    /// Sets every matrix and bias to zero; layer-norm gains stay at one.
    void zero_weights() {
        for (std::size_t i = 0; i < params_.size(); ++i) {
            const auto& n = params_.name(i);
            params_.at(i).fill(n.ends_with(".gain") ? 1.0 : 0.0);
        }
    }

    std::size_t encoder_output_len() const {
        std::size_t len = config_.input_len;
        for (std::size_t l = 0; l < config_.encoder_layers; ++l) len = detail::pool_len(len);
        return len;
    }

    Checkpoint to_checkpoint() const {
        Checkpoint c;
        c.meta = {{"kind", "forecaster"},
                  {"num_units", config_.num_units},
                  {"d_model", config_.d_model},
                  {"heads", config_.heads},
                  {"encoder_layers", config_.encoder_layers},
                  {"decoder_layers", config_.decoder_layers},
                  {"ff_dim", config_.ff_dim},
                  {"input_len", config_.input_len},
                  {"decoder_len", config_.decoder_len},
                  {"horizon", config_.horizon},
                  {"sample_factor", config_.sample_factor},
                  {"seed", config_.seed},
                  {"trained", trained_},
                  {"input_mean", input_mean_},
                  {"input_std", input_std_}};
        c.params = params_;
        return c;
    }

    static ForecastModel from_checkpoint(const Checkpoint& c) {
        if (c.meta.value("kind", std::string{}) != "forecaster")
            throw std::runtime_error("checkpoint does not hold a forecaster");
        ForecastConfig cfg;
        const auto& m = c.meta;
        cfg.num_units = m.at("num_units");
        cfg.d_model = m.at("d_model");
        cfg.heads = m.at("heads");
        cfg.encoder_layers = m.at("encoder_layers");
        cfg.decoder_layers = m.at("decoder_layers");
        cfg.ff_dim = m.at("ff_dim");
        cfg.input_len = m.at("input_len");
        cfg.decoder_len = m.at("decoder_len");
        cfg.horizon = m.at("horizon");
        cfg.sample_factor = m.at("sample_factor");
        cfg.seed = m.at("seed");
        ForecastModel model(cfg);
        if (c.params.size() != model.params_.size())
            throw std::runtime_error("forecaster checkpoint: tensor count mismatch");
        for (std::size_t i = 0; i < c.params.size(); ++i) {
            if (c.params.name(i) != model.params_.name(i) || c.params.at(i).shape() != model.params_.at(i).shape())
                throw std::runtime_error("forecaster checkpoint: tensor " + c.params.name(i) + " does not fit");
        }
        model.params_ = c.params;
        model.trained_ = m.value("trained", false);
        model.set_normalization(m.at("input_mean").get<std::vector<double>>(),
                                m.at("input_std").get<std::vector<double>>());
        return model;
    }

private:
    void validate_config() const {
        const auto& c = config_;
        if (c.num_units == 0 || c.d_model == 0 || c.heads == 0 || c.ff_dim == 0)
            throw std::invalid_argument("forecast: sizes must be positive");
        if (c.d_model % c.heads != 0)
            throw std::invalid_argument("forecast: d_model " + std::to_string(c.d_model) +
                                        " is not divisible by head count " + std::to_string(c.heads));
        if (c.decoder_len == 0 || c.decoder_len > c.input_len)
            throw std::invalid_argument("forecast: decoder history must be a non-empty suffix of the encoder input");
        if (c.horizon == 0) throw std::invalid_argument("forecast: horizon must be positive");
        if (c.encoder_layers == 0 || c.decoder_layers == 0)
            throw std::invalid_argument("forecast: need at least one encoder and one decoder block");
    }

    void add_attention(const std::string& p, std::mt19937_64& rng) {
        const std::size_t d = config_.d_model;
        for (const char* w : {"wq", "wk", "wv", "wo"}) params_.add(p + "." + w, glorot({d, d}, d, d, rng));
        params_.add(p + ".bo", Tensor(Shape{d}));
    }
    void add_norm(const std::string& p) {
        params_.add(p + ".gain", Tensor(Shape{config_.d_model}, 1.0));
        params_.add(p + ".bias", Tensor(Shape{config_.d_model}));
    }
    void add_ffn(const std::string& p, std::mt19937_64& rng) {
        const std::size_t d = config_.d_model, f = config_.ff_dim;
        params_.add(p + ".w1", glorot({d, f}, d, f, rng));
        params_.add(p + ".b1", Tensor(Shape{f}));
        params_.add(p + ".w2", glorot({f, d}, f, d, rng));
        params_.add(p + ".b2", Tensor(Shape{d}));
    }
    void add_embedding(const std::string& p, std::mt19937_64& rng) {
        const std::size_t d = config_.d_model, n = config_.num_units;
        params_.add(p + ".value", glorot({n, d}, n, d, rng));
        params_.add(p + ".time", glorot({kTimeCodeDim, d}, kTimeCodeDim, d, rng));
        params_.add(p + ".bias", Tensor(Shape{d}));
    }

    void initialize() {
        std::mt19937_64 rng(config_.seed);
        const std::size_t d = config_.d_model;
        add_embedding("enc.embed", rng);
        for (std::size_t l = 0; l < config_.encoder_layers; ++l) {
            const std::string p = "enc" + std::to_string(l);
            add_attention(p + ".attn", rng);
            add_norm(p + ".norm1");
            add_ffn(p + ".ffn", rng);
            add_norm(p + ".norm2");
            params_.add(p + ".distil.w", glorot({3, d, d}, 3 * d, 3 * d, rng));
            params_.add(p + ".distil.b", Tensor(Shape{d}));
        }
        add_embedding("dec.embed", rng);
        for (std::size_t l = 0; l < config_.decoder_layers; ++l) {
            const std::string p = "dec" + std::to_string(l);
            add_attention(p + ".self", rng);
            add_norm(p + ".norm1");
            add_attention(p + ".cross", rng);
            add_norm(p + ".norm2");
            add_ffn(p + ".ffn", rng);
            add_norm(p + ".norm3");
        }
        params_.add("out.w", glorot({d, config_.num_units}, d, config_.num_units, rng));
        params_.add("out.b", Tensor(Shape{config_.num_units}));
    }

    ForecastConfig config_;
    ParameterSet params_;
    std::vector<double> input_mean_, input_std_;
    bool trained_ = false;
};

namespace detail {

inline Tensor positional_encoding(std::size_t length, std::size_t d) {
    Tensor pe(Shape{length, d});
    for (std::size_t pos = 0; pos < length; ++pos)
        for (std::size_t i = 0; i < d; ++i) {
            const double freq = std::pow(10000.0, -static_cast<double>(2 * (i / 2)) / static_cast<double>(d));
            const double angle = static_cast<double>(pos) * freq;
            pe(pos, i) = (i % 2 == 0) ? std::sin(angle) : std::cos(angle);
        }
    return pe;
}

/// Records the forecaster on a graph. Parameters are looked up by name.
class ForecastNet {
public:
    ForecastNet(Graph& g, const ForecastModel& model, bool trainable)
        : g_(g), model_(model), bound_(bind(g, model.params(), trainable)) {}

    const BoundParams& bound() const noexcept { return bound_; }

    NodeId p(const std::string& name) const { return bound_[model_.params().position(name)]; }

    /// Scales raw MW rows to model units. Rows from `zero_from` on stay zero.
    Tensor normalize(const Tensor& raw, std::size_t zero_from) const {
        Tensor x(raw.shape());
        const auto& mean = model_.input_mean();
        const auto& sd = model_.input_std();
        for (std::size_t r = 0; r < std::min(zero_from, raw.dim(0)); ++r)
            for (std::size_t c = 0; c < raw.dim(1); ++c) x(r, c) = (raw(r, c) - mean[c]) / sd[c];
        return x;
    }

    NodeId embed(const std::string& prefix, const Tensor& values, const Tensor& time) {
        const std::size_t len = values.dim(0);
        NodeId x = g_.add(g_.matmul(g_.constant(values), p(prefix + ".value")),
                          g_.matmul(g_.constant(time), p(prefix + ".time")));
        x = g_.add(x, p(prefix + ".bias"));
        return g_.add(x, g_.constant(positional_encoding(len, model_.config().d_model)));
    }

    NodeId attention(const std::string& prefix, NodeId xq, NodeId xkv, bool sparse, std::uint64_t site) {
        const auto& cfg = model_.config();
        const std::size_t dh = cfg.d_model / cfg.heads;
        const NodeId q = g_.matmul(xq, p(prefix + ".wq"));
        const NodeId k = g_.matmul(xkv, p(prefix + ".wk"));
        const NodeId v = g_.matmul(xkv, p(prefix + ".wv"));
        const std::size_t lq = g_.value(q).dim(0), lk = g_.value(k).dim(0);
        std::vector<NodeId> heads;
        for (std::size_t h = 0; h < cfg.heads; ++h) {
            const NodeId qh = cfg.heads == 1 ? q : g_.slice_cols(q, h * dh, (h + 1) * dh);
            const NodeId kh = cfg.heads == 1 ? k : g_.slice_cols(k, h * dh, (h + 1) * dh);
            const NodeId vh = cfg.heads == 1 ? v : g_.slice_cols(v, h * dh, (h + 1) * dh);
            const std::size_t u = sparse ? dominant_count(lq, cfg.sample_factor) : lq;
            const std::uint64_t seed = cfg.seed * 1000003ULL + site * 131ULL + h;
            heads.push_back(probsparse_node(g_, qh, kh, vh, u, dominant_count(lk, cfg.sample_factor), seed));
        }
        const NodeId joined = heads.size() == 1 ? heads[0] : g_.concat_cols(heads);
        return g_.add(g_.matmul(joined, p(prefix + ".wo")), p(prefix + ".bo"));
    }

    NodeId norm(const std::string& prefix, NodeId x) {
        return g_.layer_norm(x, p(prefix + ".gain"), p(prefix + ".bias"));
    }

    NodeId ffn(const std::string& prefix, NodeId x) {
        const NodeId h = g_.gelu(g_.add(g_.matmul(x, p(prefix + ".w1")), p(prefix + ".b1")));
        return g_.add(g_.matmul(h, p(prefix + ".w2")), p(prefix + ".b2"));
    }

    NodeId encoder(const Tensor& input, const Tensor& time) {
        const auto& cfg = model_.config();
        if (input.rank() != 2 || input.dim(0) != cfg.input_len || input.dim(1) != cfg.num_units)
            throw ShapeError("encoder_forward: input " + to_string(input.shape()) + " expected [" +
                             std::to_string(cfg.input_len) + "," + std::to_string(cfg.num_units) + "]");
        if (time.rank() != 2 || time.dim(0) != cfg.input_len || time.dim(1) != kTimeCodeDim)
            throw ShapeError("encoder_forward: time codes " + to_string(time.shape()) + " expected [" +
                             std::to_string(cfg.input_len) + ",4]");
        NodeId x = embed("enc.embed", normalize(input, input.dim(0)), time);
        for (std::size_t l = 0; l < cfg.encoder_layers; ++l) {
            const std::string pre = "enc" + std::to_string(l);
            x = norm(pre + ".norm1", g_.add(x, attention(pre + ".attn", x, x, true, l)));
            x = norm(pre + ".norm2", g_.add(x, ffn(pre + ".ffn", x)));
            const NodeId conv = g_.apply(OpKind::conv1d, {x, p(pre + ".distil.w"), p(pre + ".distil.b")});
            x = g_.maxpool1d(g_.add(x, g_.gelu(conv)));
        }
        return x;
    }

    /// Returns the normalized horizon rows (horizon x n_new), unclipped.
    NodeId decoder(const Tensor& known, const Tensor& time, NodeId memory) {
        const auto& cfg = model_.config();
        const std::size_t total = cfg.decoder_len + cfg.horizon;
        if (known.rank() != 2 || known.dim(0) != total || known.dim(1) != cfg.num_units)
            throw ShapeError("decoder_predict: input " + to_string(known.shape()) + " expected [" +
                             std::to_string(total) + "," + std::to_string(cfg.num_units) + "]");
        if (time.rank() != 2 || time.dim(0) != total || time.dim(1) != kTimeCodeDim)
            throw ShapeError("decoder_predict: time codes " + to_string(time.shape()) + " expected [" +
                             std::to_string(total) + ",4]");
        for (std::size_t r = cfg.decoder_len; r < total; ++r)
            for (std::size_t c = 0; c < cfg.num_units; ++c)
                if (known(r, c) != 0.0)
                    throw std::invalid_argument("decoder_predict: horizon padding row " + std::to_string(r) +
                                                " is not zero");
        NodeId y = embed("dec.embed", normalize(known, cfg.decoder_len), time);
        for (std::size_t l = 0; l < cfg.decoder_layers; ++l) {
            const std::string pre = "dec" + std::to_string(l);
            y = norm(pre + ".norm1", g_.add(y, attention(pre + ".self", y, y, true, 100 + l)));
            y = norm(pre + ".norm2", g_.add(y, attention(pre + ".cross", y, memory, false, 200 + l)));
            y = norm(pre + ".norm3", g_.add(y, ffn(pre + ".ffn", y)));
        }
        const NodeId out = g_.add(g_.matmul(y, p("out.w")), p("out.b"));
        return g_.slice_rows(out, cfg.decoder_len, total);
    }

    /// Converts normalized predictions back to MW and clips at zero.
    Tensor denormalize(const Tensor& z) const {
        Tensor out(z.shape());
        const auto& mean = model_.input_mean();
        const auto& sd = model_.input_std();
        for (std::size_t r = 0; r < z.dim(0); ++r)
            for (std::size_t c = 0; c < z.dim(1); ++c) out(r, c) = std::max(0.0, z(r, c) * sd[c] + mean[c]);
        return out;
    }

private:
    Graph& g_;
    const ForecastModel& model_;
    BoundParams bound_;
};

}  // namespace detail

/// Encoder features (input_len halved once per block) for raw MW input.
inline Tensor encoder_forward(const ForecastModel& model, const Tensor& encoder_input, const Tensor& time_codes) {
    Graph g;
    detail::ForecastNet net(g, model, false);
    return g.value(net.encoder(encoder_input, time_codes));
}

/// One generative pass over the zero-padded decoder input.
inline Tensor decoder_predict(const ForecastModel& model, const Tensor& decoder_input, const Tensor& time_codes,
                              const Tensor& encoder_features) {
    Graph g;
    detail::ForecastNet net(g, model, false);
    const NodeId z = net.decoder(decoder_input, time_codes, g.constant(encoder_features));
    return net.denormalize(g.value(z));
}

/// Decoder input: the known suffix followed by zero rows for the horizon.
inline Tensor pad_decoder_input(const Tensor& known, std::size_t horizon) {
    Tensor out(Shape{known.dim(0) + horizon, known.dim(1)});
    std::copy(known.values().begin(), known.values().end(), out.values().begin());
    return out;
}

inline Tensor predict_window(const ForecastModel& model, const WindowSample& w) {
    const auto features = encoder_forward(model, w.encoder_input, w.encoder_time);
    return decoder_predict(model, pad_decoder_input(w.decoder_known, model.config().horizon), w.decoder_time,
                           features);
}

/// Forecast issued on day t0 from the 56 realized days ending at t0.
inline PredictionSnapshot issue_snapshot(const ForecastModel& model, const RenewableSeries& series, std::size_t t0) {
    const auto& cfg = model.config();
    if (t0 + 1 < cfg.input_len)
        throw std::invalid_argument("issue_snapshot: day " + std::to_string(t0) + " has fewer than " +
                                    std::to_string(cfg.input_len) + " days of history");
    if (t0 >= series.num_days) throw std::out_of_range("issue_snapshot: day beyond the series");
    if (series.num_units != cfg.num_units) throw ShapeError("issue_snapshot: series unit count differs from model");
    const std::size_t first = t0 + 1 - cfg.input_len;
    const std::size_t dec_first = t0 + 1 - cfg.decoder_len;
    const Tensor enc = series.block(first, cfg.input_len);
    const auto features = encoder_forward(model, enc, time_codes(first, cfg.input_len));
    const Tensor dec = pad_decoder_input(series.block(dec_first, cfg.decoder_len), cfg.horizon);
    return {t0, decoder_predict(model, dec, time_codes(dec_first, cfg.decoder_len + cfg.horizon), features)};
}

// ---------------------------------------------------------------------------
// Training and evaluation

inline double rmse(const Tensor& pred, const Tensor& real) {
    if (pred.shape() != real.shape())
        throw ShapeError("rmse: shapes " + to_string(pred.shape()) + " and " + to_string(real.shape()) + " differ");
    if (pred.size() == 0) throw ShapeError("rmse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) s += (pred[i] - real[i]) * (pred[i] - real[i]);
    return std::sqrt(s / static_cast<double>(pred.size()));
}

/// Per-unit mean and standard deviation over the encoder inputs of the given windows.
inline void fit_normalization(ForecastModel& model, const std::vector<WindowSample>& windows) {
    const std::size_t n = model.config().num_units;
    std::vector<double> mean(n, 0.0), sq(n, 0.0);
    double count = 0.0;
    for (const auto& w : windows) {
        for (std::size_t r = 0; r < w.encoder_input.dim(0); ++r)
            for (std::size_t c = 0; c < n; ++c) {
                mean[c] += w.encoder_input(r, c);
                sq[c] += w.encoder_input(r, c) * w.encoder_input(r, c);
            }
        count += static_cast<double>(w.encoder_input.dim(0));
    }
    if (count == 0.0) throw std::invalid_argument("fit_normalization: no windows");
    std::vector<double> sd(n);
    for (std::size_t c = 0; c < n; ++c) {
        mean[c] /= count;
        sd[c] = std::sqrt(std::max(sq[c] / count - mean[c] * mean[c], 0.0));
        if (sd[c] < 1e-6) sd[c] = 1.0;
    }
    model.set_normalization(std::move(mean), std::move(sd));
}

struct ForecastLoss {
    double value = 0.0;
    std::vector<Tensor> grads;
};

/// Mean squared error in normalized units for one window, with parameter gradients.
inline ForecastLoss window_loss(const ForecastModel& model, const WindowSample& w, bool with_grad = true) {
    Graph g;
    detail::ForecastNet net(g, model, with_grad);
    const NodeId memory = net.encoder(w.encoder_input, w.encoder_time);
    const NodeId pred = net.decoder(pad_decoder_input(w.decoder_known, model.config().horizon), w.decoder_time, memory);
    const NodeId target = g.constant(net.normalize(w.target, w.target.dim(0)));
    const NodeId loss = g.mse_loss(pred, target);
    ForecastLoss out;
    out.value = g.value(loss).item();
    if (with_grad) out.grads = collect(g.backward(loss), net.bound());
    return out;
}

struct ForecastTrainConfig {
    std::size_t epochs = 20;
    double learning_rate = 1e-3;
    std::size_t batch_size = 16;
    bool shuffle = true;
    std::uint64_t seed = 7;
    bool fit_scale = true;          // derive normalization from the training windows first
    double holdout_fraction = 0.0;  // trailing share of windows kept for picking the best epoch
    double weight_decay = 0.0;      // decoupled, applied to matrices only
};

struct ForecastTrainReport {
    std::vector<double> loss;        // mean training-window loss per epoch
    std::vector<double> validation;  // holdout loss per epoch, empty without a holdout
    std::size_t best_epoch = 0;      // 1-based epoch whose parameters were kept
};

/// Mean normalized squared error over windows, no gradients.
inline double mean_window_loss(const ForecastModel& model, const std::vector<WindowSample>& windows) {
    double total = 0.0;
    for (const auto& w : windows) total += window_loss(model, w, false).value;
    return windows.empty() ? 0.0 : total / static_cast<double>(windows.size());
}

/// Adam over mini-batches. With a holdout, the chronologically last windows are
/// set aside (training windows whose targets overlap them are dropped) and the
/// parameters of the epoch with the lowest holdout loss are restored at the end.
inline ForecastTrainReport train_report(ForecastModel& model, const std::vector<WindowSample>& windows,
                                        const ForecastTrainConfig& tc) {
    if (windows.empty()) throw std::invalid_argument("train: need at least one training window");
    if (tc.learning_rate < 0.0) throw std::invalid_argument("train: learning rate must be nonnegative");
    if (tc.batch_size == 0) throw std::invalid_argument("train: batch size must be positive");
    if (tc.holdout_fraction < 0.0 || tc.holdout_fraction >= 1.0)
        throw std::invalid_argument("train: holdout fraction must lie in [0, 1)");

    std::vector<WindowSample> fit, holdout;
    const auto n_hold = static_cast<std::size_t>(tc.holdout_fraction * static_cast<double>(windows.size()));
    if (n_hold > 0) {
        std::vector<std::size_t> starts;
        for (const auto& w : windows) starts.push_back(w.start);
        std::sort(starts.begin(), starts.end());
        const std::size_t first_hold = starts[starts.size() - n_hold];
        const std::size_t h = model.config().horizon;
        for (const auto& w : windows) {
            if (w.start >= first_hold)
                holdout.push_back(w);
            else if (w.start + h <= first_hold)
                fit.push_back(w);
        }
        if (fit.empty()) throw std::invalid_argument("train: holdout leaves no training windows");
    }
    const std::vector<WindowSample>& train_set = n_hold > 0 ? fit : windows;
    if (tc.fit_scale) fit_normalization(model, train_set);

    Adam opt(tc.learning_rate);
    std::mt19937_64 rng(tc.seed);
    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    ForecastTrainReport report;
    ParameterSet best = model.params();
    double best_val = std::numeric_limits<double>::infinity();
    for (std::size_t epoch = 0; epoch < tc.epochs; ++epoch) {
        if (tc.shuffle) std::shuffle(order.begin(), order.end(), rng);
        double total = 0.0;
        for (std::size_t b = 0; b < order.size(); b += tc.batch_size) {
            const std::size_t end = std::min(order.size(), b + tc.batch_size);
            std::vector<Tensor> acc;
            for (std::size_t i = b; i < end; ++i) {
                auto l = window_loss(model, train_set[order[i]]);
                if (!std::isfinite(l.value))
                    throw ForecastError("forecast training diverged (non-finite loss) in epoch " +
                                        std::to_string(epoch + 1));
                total += l.value;
                if (acc.empty()) {
                    acc = std::move(l.grads);
                } else {
                    for (std::size_t k = 0; k < acc.size(); ++k)
                        for (std::size_t j = 0; j < acc[k].size(); ++j) acc[k][j] += l.grads[k][j];
                }
            }
            const double inv = 1.0 / static_cast<double>(end - b);
            for (auto& t : acc)
                for (auto& v : t.values()) v *= inv;
            if (tc.learning_rate > 0.0) {
                opt.step(model.params().tensors(), acc);
                if (tc.weight_decay > 0.0) {
                    const double shrink = 1.0 - tc.learning_rate * tc.weight_decay;
                    for (auto& t : model.params().tensors())
                        if (t.rank() >= 2)
                            for (auto& v : t.values()) v *= shrink;
                }
            }
        }
        report.loss.push_back(total / static_cast<double>(train_set.size()));
        if (!holdout.empty()) {
            const double val = mean_window_loss(model, holdout);
            report.validation.push_back(val);
            if (val < best_val) {
                best_val = val;
                best = model.params();
                report.best_epoch = epoch + 1;
            }
        }
    }
    if (!holdout.empty() && report.best_epoch > 0) model.params() = best;
    if (holdout.empty()) report.best_epoch = tc.epochs;
    model.set_trained(true);
    return report;
}

/// Per-epoch mean training loss.
inline std::vector<double> train(ForecastModel& model, const std::vector<WindowSample>& windows,
                                 const ForecastTrainConfig& tc) {
    return train_report(model, windows, tc).loss;
}

/// Mean RMSE (MW) of clipped forecasts over the windows.
inline double mean_window_rmse(const ForecastModel& model, const std::vector<WindowSample>& windows) {
    if (windows.empty()) throw std::invalid_argument("mean_window_rmse: no windows");
    double total = 0.0;
    for (const auto& w : windows) total += rmse(predict_window(model, w), w.target);
    return total / static_cast<double>(windows.size());
}

}  // namespace gridpatch
