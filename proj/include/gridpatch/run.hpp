#pragma once

// Experiment plumbing shared by the command-line tool and the acceptance
// runner: the flat key-value run configuration, forecast evaluation against
// the single-snapshot and persistence baselines, dispatch variants, and CSV
// report writers. Every report is a pure function of (config, seed).

#include <charconv>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <openssl/evp.h>

#include "gridpatch/ddpg.hpp"

namespace gridpatch {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Missing input artifact or unwritable output.
class ArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------- config

struct RunConfig {
    std::uint64_t seed = 2024;  // drives series, case, network init, shuffling and exploration
    std::size_t days = 4000;
    CaseSizes sizes;
    ForecastConfig forecast;
    ForecastTrainConfig forecast_train{.epochs = 12, .learning_rate = 1e-3, .batch_size = 16, .holdout_fraction = 0.1};
    double train_fraction = 0.9;
    ConformerOptions conformer;
    std::vector<std::size_t> sweep_inputs{48, 56, 64, 72, 80, 88, 96};
    std::vector<std::size_t> sweep_horizons{15, 20, 25, 30};
    std::size_t sweep_epochs = 4;
    double omega_r = 2.0;
    DispatchConfig dispatch;

    /// Pushes the master seed and the renewable count into the nested configs.
    void resolve() {
        forecast.num_units = sizes.renewables;
        forecast.seed = seed;
        forecast_train.seed = seed;
        dispatch.agent.seed = seed;
    }

    WindowConfig windows() const {
        return {forecast.input_len, forecast.decoder_len, forecast.horizon, train_fraction};
    }

    void validate() const {
        if (days < kMinSynthDays) throw ConfigError("data.days must be at least " + std::to_string(kMinSynthDays));
        if (sizes.renewables < 1 || sizes.renewables >= sizes.generators)
            throw ConfigError("case.renewables must lie in [1, case.generators)");
        if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ConfigError("forecast.train_fraction must lie in (0, 1)");
        if (conformer.length + kEnsembleSize > forecast.horizon)
            throw ConfigError("forecast.horizon must be at least confidence.length + 5");
        if (!(conformer.mu > 0.0)) throw ConfigError("confidence.mu must be positive");
        if (dispatch.forecast_rows > conformer.length)
            throw ConfigError("dispatch.horizon must not exceed confidence.length");
        if (dispatch.episodes == 0 || dispatch.max_steps == 0 || dispatch.eval_episodes == 0)
            throw ConfigError("dispatch.episodes, dispatch.max_steps and dispatch.eval_episodes must be positive");
        if (sweep_inputs.empty() || sweep_horizons.empty()) throw ConfigError("sweep lists must not be empty");
        for (std::size_t h : sweep_horizons)
            if (h < kEnsembleSize + 1) throw ConfigError("sweep.horizons entries must exceed 5");
        for (std::size_t l : sweep_inputs)
            if (l < 2) throw ConfigError("sweep.inputs entries must be at least 2");
        try {
            dispatch.agent.validate();
            dispatch.necessity.validate(sizes.generators);
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
};

namespace detail {

inline std::string format_value(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}
inline std::string format_value(std::size_t v) { return std::to_string(v); }
inline std::string format_value(bool v) { return v ? "true" : "false"; }
inline std::string format_value(const std::vector<std::size_t>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
    return out;
}

template <class T>
void parse_number(const std::string& key, const std::string& text, T& out) {
    T v{};
    auto r = std::from_chars(text.data(), text.data() + text.size(), v);
    if (r.ec != std::errc{} || r.ptr != text.data() + text.size())
        throw ConfigError(key + ": cannot parse '" + text + "'");
    if constexpr (std::is_floating_point_v<T>)
        if (!std::isfinite(v)) throw ConfigError(key + ": value must be finite");
    out = v;
}
inline void parse_value(const std::string& key, const std::string& text, double& out) { parse_number(key, text, out); }
inline void parse_value(const std::string& key, const std::string& text, std::size_t& out) { parse_number(key, text, out); }
inline void parse_value(const std::string& key, const std::string& text, bool& out) {
    if (text == "true" || text == "1")
        out = true;
    else if (text == "false" || text == "0")
        out = false;
    else
        throw ConfigError(key + ": expected true or false, got '" + text + "'");
}
inline void parse_value(const std::string& key, const std::string& text, std::vector<std::size_t>& out) {
    std::vector<std::size_t> v;
    for (const auto& cell : split_csv_line(text)) {
        std::size_t x = 0;
        parse_number(key, cell, x);
        v.push_back(x);
    }
    out = std::move(v);
}

/// Calls f(key, field) for every configurable field, in file order.
template <class F>
void visit_fields(RunConfig& c, F&& f) {
    f("seed", c.seed);
    f("data.days", c.days);
    f("case.buses", c.sizes.buses);
    f("case.generators", c.sizes.generators);
    f("case.branches", c.sizes.branches);
    f("case.loads", c.sizes.loads);
    f("case.renewables", c.sizes.renewables);
    f("forecast.d_model", c.forecast.d_model);
    f("forecast.heads", c.forecast.heads);
    f("forecast.encoder_layers", c.forecast.encoder_layers);
    f("forecast.decoder_layers", c.forecast.decoder_layers);
    f("forecast.ff_dim", c.forecast.ff_dim);
    f("forecast.input_len", c.forecast.input_len);
    f("forecast.decoder_len", c.forecast.decoder_len);
    f("forecast.horizon", c.forecast.horizon);
    f("forecast.sample_factor", c.forecast.sample_factor);
    f("forecast.epochs", c.forecast_train.epochs);
    f("forecast.learning_rate", c.forecast_train.learning_rate);
    f("forecast.batch_size", c.forecast_train.batch_size);
    f("forecast.holdout_fraction", c.forecast_train.holdout_fraction);
    f("forecast.weight_decay", c.forecast_train.weight_decay);
    f("forecast.train_fraction", c.train_fraction);
    f("confidence.mu", c.conformer.mu);
    f("confidence.length", c.conformer.length);
    f("sweep.inputs", c.sweep_inputs);
    f("sweep.horizons", c.sweep_horizons);
    f("sweep.epochs", c.sweep_epochs);
    f("env.omega_r", c.omega_r);
    f("dispatch.horizon", c.dispatch.forecast_rows);
    f("dispatch.omega_p", c.dispatch.necessity.omega_p);
    f("dispatch.phi_r", c.dispatch.necessity.phi_r);
    f("dispatch.phi_l", c.dispatch.necessity.phi_l);
    f("dispatch.n_dis", c.dispatch.necessity.n_dis);
    f("dispatch.episodes", c.dispatch.episodes);
    f("dispatch.max_steps", c.dispatch.max_steps);
    f("dispatch.eval_episodes", c.dispatch.eval_episodes);
    f("dispatch.standardize_state", c.dispatch.standardize_state);
    f("agent.gamma", c.dispatch.agent.gamma);
    f("agent.tau", c.dispatch.agent.tau);
    f("agent.batch_size", c.dispatch.agent.batch_size);
    f("agent.replay_capacity", c.dispatch.agent.replay_capacity);
    f("agent.hidden", c.dispatch.agent.hidden);
    f("agent.actor_lr", c.dispatch.agent.actor_lr);
    f("agent.critic_lr", c.dispatch.agent.critic_lr);
    f("agent.sigma_start", c.dispatch.agent.sigma_start);
    f("agent.sigma_end", c.dispatch.agent.sigma_end);
    f("agent.warmup", c.dispatch.agent.warmup);
    f("agent.critic_l2", c.dispatch.agent.critic_l2);
    f("agent.updates_per_step", c.dispatch.agent.updates_per_step);
    f("agent.incremental", c.dispatch.agent.incremental);
    f("agent.renewable_step", c.dispatch.agent.renewable_step);
}

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

}  // namespace detail

/// Sets one field from its textual value.
inline void set_config_value(RunConfig& c, const std::string& key, const std::string& value) {
    bool found = false;
    detail::visit_fields(c, [&](const char* k, auto& field) {
        if (key != k) return;
        found = true;
        if constexpr (std::is_same_v<std::decay_t<decltype(field)>, std::uint64_t>)
            detail::parse_number(key, value, field);
        else
            detail::parse_value(key, value, field);
    });
    if (!found) throw ConfigError("unknown config key '" + key + "'");
}

/// `key = value` lines; blank lines and lines starting with '#' are skipped.
inline void apply_config_text(RunConfig& c, std::istream& in, const std::string& source) {
    std::string line;
    for (std::size_t row = 1; std::getline(in, line); ++row) {
        line = detail::trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(row) + ": expected key = value");
        try {
            set_config_value(c, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError(source + ":" + std::to_string(row) + ": " + e.what());
        }
    }
}

inline void load_config_file(RunConfig& c, const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ArtifactError("cannot open config file " + path);
    apply_config_text(c, in, path);
}

inline std::string config_text(const RunConfig& cfg) {
    RunConfig c = cfg;
    std::string out;
    detail::visit_fields(c, [&](const char* k, auto& field) {
        if constexpr (std::is_same_v<std::decay_t<decltype(field)>, std::uint64_t>)
            out += std::string(k) + " = " + std::to_string(field) + "\n";
        else
            out += std::string(k) + " = " + detail::format_value(field) + "\n";
    });
    return out;
}

// ---------------------------------------------------------------- files

inline std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ArtifactError("cannot read " + path);
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx(EVP_MD_CTX_new(), EVP_MD_CTX_free);
    if (!ctx || EVP_DigestInit_ex(ctx.get(), EVP_sha256(), nullptr) != 1) throw std::runtime_error("sha256: init failed");
    std::vector<char> buf(1 << 16);
    while (in) {
        in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
        if (in.gcount() > 0) EVP_DigestUpdate(ctx.get(), buf.data(), static_cast<std::size_t>(in.gcount()));
    }
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    EVP_DigestFinal_ex(ctx.get(), md, &len);
    std::ostringstream hex;
    for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(md[i]);
    return hex.str();
}

/// manifest.json in `dir` maps file names to their SHA-256; entries are
/// merged so successive commands extend one manifest.
inline void record_in_manifest(const std::filesystem::path& dir, const std::vector<std::string>& names) {
    const auto path = dir / "manifest.json";
    nlohmann::json doc = nlohmann::json::object();
    if (std::filesystem::exists(path)) {
        std::ifstream in(path);
        try {
            in >> doc;
        } catch (const nlohmann::json::exception&) {
            doc = nlohmann::json::object();
        }
    }
    for (const auto& n : names) doc["files"][n] = {{"sha256", sha256_file((dir / n).string())}};
    std::ofstream out(path);
    if (!out) throw ArtifactError("cannot write " + path.string());
    out << doc.dump(2) << '\n';
}

/// Names whose recorded hash no longer matches the file.
inline std::vector<std::string> verify_manifest(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw ArtifactError("cannot open " + (dir / "manifest.json").string());
    nlohmann::json doc;
    in >> doc;
    std::vector<std::string> bad;
    for (const auto& [name, entry] : doc["files"].items()) {
        const auto p = dir / name;
        if (!std::filesystem::exists(p) || sha256_file(p.string()) != entry["sha256"].get<std::string>()) bad.push_back(name);
    }
    return bad;
}

/// Minimal CSV writer with shortest round-trip number formatting.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const std::vector<std::string>& header) : out_(path) {
        if (!out_) throw ArtifactError("cannot write " + path.string());
        row(header);
    }
    void row(const std::vector<std::string>& cells) {
        for (std::size_t i = 0; i < cells.size(); ++i) out_ << (i ? "," : "") << cells[i];
        out_ << '\n';
    }
    static std::string num(double v) { return detail::format_value(v); }
    static std::string num(std::size_t v) { return std::to_string(v); }

private:
    std::ofstream out_;
};

// ---------------------------------------------------------------- data

inline RenewableSeries make_series(const RunConfig& c) { return synth_series(c.seed, c.sizes.renewables, c.days); }

inline GridCase make_case(const RunConfig& c, const RenewableSeries& s) {
    GridCase g = generate_case(c.seed, c.sizes);
    fit_renewable_capacity(g, s);
    return g;
}

// ---------------------------------------------------------------- forecasting

/// One test window: a forecast issued on t0 for days t0+1 .. t0+length.
struct ForecastWindowEval {
    std::size_t t0 = 0;
    double conformer = 0.0;    // blended five-snapshot forecast
    double snapshot = 0.0;     // the fresh day-t0 snapshot alone
    double persistence = 0.0;  // day-t0 output held flat
    std::vector<double> member_rmse;  // aged rows of each blended snapshot, oldest first
    std::vector<double> lambda;
    double bound = 0.0;  // sum_i lambda_i * member_rmse_i
    double worst = 0.0;  // max_i member_rmse_i
};

struct ForecastEvalSummary {
    std::size_t windows = 0;
    double conformer = 0.0, snapshot = 0.0, persistence = 0.0, bound = 0.0;
    double win_rate = 0.0;  // share of windows with conformer strictly below snapshot
};

/// Walks the snapshot pool through [first_day, last day - length] and scores
/// every window that has a full ensemble.
inline std::vector<ForecastWindowEval> evaluate_forecaster(const ForecastModel& model, const RenewableSeries& s,
                                                           std::size_t first_day, const ConformerOptions& opt) {
    if (first_day + opt.length >= s.num_days) throw std::invalid_argument("evaluate_forecaster: no test windows");
    SnapshotPool pool;
    pool.reset(first_day);
    std::vector<ForecastWindowEval> out;
    const std::size_t units = s.num_units;
    for (std::size_t t0 = first_day; t0 + opt.length < s.num_days; ++t0) {
        auto res = conformer_predict(t0, pool, model, s, opt);
        if (!res.warm) continue;
        const Tensor real = s.block(t0 + 1, opt.length);
        ForecastWindowEval w;
        w.t0 = t0;
        w.conformer = rmse(res.forecast, real);
        const Tensor& fresh = pool.at(t0).values;
        Tensor head(Shape{opt.length, units}), flat(Shape{opt.length, units});
        for (std::size_t r = 0; r < opt.length; ++r)
            for (std::size_t u = 0; u < units; ++u) {
                head(r, u) = fresh(r, u);
                flat(r, u) = s.at(t0, u);
            }
        w.snapshot = rmse(head, real);
        w.persistence = rmse(flat, real);
        for (const auto& rec : res.records) {
            const std::size_t age = t0 - rec.issue_time;
            const Tensor& v = pool.at(rec.issue_time).values;
            Tensor aged(Shape{opt.length, units});
            for (std::size_t r = 0; r < opt.length; ++r)
                for (std::size_t u = 0; u < units; ++u) aged(r, u) = v(age + r, u);
            w.member_rmse.push_back(rmse(aged, real));
            w.lambda.push_back(rec.lambda);
            w.bound += rec.lambda * w.member_rmse.back();
            w.worst = std::max(w.worst, w.member_rmse.back());
        }
        out.push_back(std::move(w));
    }
    return out;
}

inline ForecastEvalSummary summarize(const std::vector<ForecastWindowEval>& ws) {
    ForecastEvalSummary s;
    s.windows = ws.size();
    if (ws.empty()) return s;
    std::size_t wins = 0;
    for (const auto& w : ws) {
        s.conformer += w.conformer;
        s.snapshot += w.snapshot;
        s.persistence += w.persistence;
        s.bound += w.bound;
        wins += w.conformer < w.snapshot;
    }
    const double n = static_cast<double>(ws.size());
    s.conformer /= n;
    s.snapshot /= n;
    s.persistence /= n;
    s.bound /= n;
    s.win_rate = static_cast<double>(wins) / n;
    return s;
}

inline void write_forecast_windows(const std::filesystem::path& path, const std::vector<ForecastWindowEval>& ws) {
    CsvWriter csv(path, {"t0", "conformer", "snapshot", "persistence", "bound", "worst", "rmse_1", "rmse_2", "rmse_3",
                         "rmse_4", "rmse_5", "lambda_1", "lambda_2", "lambda_3", "lambda_4", "lambda_5"});
    for (const auto& w : ws) {
        std::vector<std::string> row{CsvWriter::num(w.t0), CsvWriter::num(w.conformer), CsvWriter::num(w.snapshot),
                                     CsvWriter::num(w.persistence), CsvWriter::num(w.bound), CsvWriter::num(w.worst)};
        for (double x : w.member_rmse) row.push_back(CsvWriter::num(x));
        for (double x : w.lambda) row.push_back(CsvWriter::num(x));
        csv.row(row);
    }
}

/// Trains a forecaster on the windows before the split boundary.
inline ForecastTrainReport train_forecaster(ForecastModel& model, const RenewableSeries& s, const RunConfig& c) {
    WindowConfig wc{model.config().input_len, model.config().decoder_len, model.config().horizon, c.train_fraction};
    return train_report(model, make_windows(s, wc).train, c.forecast_train);
}

struct SweepCell {
    std::size_t input_len = 0, horizon = 0;
    ForecastEvalSummary summary;
};

/// Model settings for one sweep cell: the decoder sees the latter half of
/// the input and the final forecast keeps horizon - 5 rows.
inline RunConfig sweep_cell_config(const RunConfig& base, std::size_t input_len, std::size_t horizon, std::size_t index) {
    RunConfig c = base;
    c.forecast.input_len = input_len;
    c.forecast.decoder_len = std::max<std::size_t>(1, input_len / 2);
    c.forecast.horizon = horizon;
    c.forecast.seed = base.seed + index;
    c.forecast_train.seed = base.seed + index;
    c.forecast_train.epochs = base.sweep_epochs;
    c.conformer.length = horizon - kEnsembleSize;
    return c;
}

// ---------------------------------------------------------------- dispatch

/// Everything an episode needs, built from the series, case and forecaster.
struct DispatchSetup {
    GridEnv env;
    std::optional<ForecastCache> cache;
    StartRange range;
    std::vector<std::size_t> eval_days;

    const ForecastCache* fc() const { return cache ? &*cache : nullptr; }
};

/// The forecast cache covers the test region; start days and evaluation days
/// are those usable with a full 10-row forecast so every variant sees the
/// same days.
inline DispatchSetup make_dispatch_setup(const RunConfig& c, GridCase grid, RenewableSeries s, const ForecastModel* model) {
    const std::size_t boundary = split_boundary(s.num_days, c.train_fraction);
    std::optional<ForecastCache> cache;
    if (model) cache.emplace(*model, s, boundary, s.num_days - 1, c.conformer);
    GridEnv env(std::move(grid), std::move(s), EnvConfig{.omega_r = c.omega_r});
    const std::size_t rows = cache ? c.conformer.length : 0;
    const StartRange range = start_range(env, cache ? &*cache : nullptr, rows, boundary);
    auto days = evaluation_days(range, c.dispatch.eval_episodes, c.dispatch.max_steps);
    return {std::move(env), std::move(cache), range, std::move(days)};
}

struct PolicyReport {
    std::string policy;
    std::vector<EpisodeRecord> episodes;
};

inline EpisodeScores mean_scores(const std::vector<EpisodeRecord>& eps) {
    EpisodeScores m;
    if (eps.empty()) return m;
    double steps = 0.0;
    for (const auto& e : eps) {
        steps += static_cast<double>(e.scores.steps);
        m.security += e.scores.security;
        m.avg_cost += e.scores.avg_cost;
        m.avg_urre += e.scores.avg_urre;
        m.total_reward += e.scores.total_reward;
    }
    const double n = static_cast<double>(eps.size());
    m.steps = static_cast<std::size_t>(std::lround(steps / n));
    m.security /= n;
    m.avg_cost /= n;
    m.avg_urre /= n;
    m.total_reward /= n;
    return m;
}

inline void write_training_log(const std::filesystem::path& path, const std::vector<EpisodeRecord>& eps) {
    CsvWriter csv(path, {"episode", "steps", "total_reward", "security", "avg_cost", "avg_urre"});
    for (std::size_t i = 0; i < eps.size(); ++i) {
        const auto& s = eps[i].scores;
        csv.row({CsvWriter::num(i), CsvWriter::num(s.steps), CsvWriter::num(s.total_reward), CsvWriter::num(s.security),
                 CsvWriter::num(s.avg_cost), CsvWriter::num(s.avg_urre)});
    }
}

/// One row per evaluation episode plus a mean row per policy.
inline void write_dispatch_summary(const std::filesystem::path& path, const std::vector<PolicyReport>& reports) {
    CsvWriter csv(path, {"policy", "episode", "start_day", "reason", "steps", "security", "avg_cost", "avg_urre",
                         "total_reward"});
    for (const auto& r : reports) {
        for (std::size_t i = 0; i < r.episodes.size(); ++i) {
            const auto& e = r.episodes[i];
            csv.row({r.policy, CsvWriter::num(i), CsvWriter::num(e.start_day), e.reason, CsvWriter::num(e.scores.steps),
                     CsvWriter::num(e.scores.security), CsvWriter::num(e.scores.avg_cost),
                     CsvWriter::num(e.scores.avg_urre), CsvWriter::num(e.scores.total_reward)});
        }
        const auto m = mean_scores(r.episodes);
        csv.row({r.policy, "mean", "", "", CsvWriter::num(m.steps), CsvWriter::num(m.security), CsvWriter::num(m.avg_cost),
                 CsvWriter::num(m.avg_urre), CsvWriter::num(m.total_reward)});
    }
}

/// Per-step components with running totals: cumulative reward and the
/// running means of cost and renewable utilization.
inline void write_dispatch_trace(const std::filesystem::path& path, const std::vector<PolicyReport>& reports) {
    CsvWriter csv(path, {"policy", "episode", "step", "day", "reward", "s_b", "zeta_s_r", "zeta_s_v", "zeta_cost", "cost",
                         "urre", "changed", "cum_reward", "mean_cost", "mean_urre"});
    for (const auto& r : reports)
        for (std::size_t i = 0; i < r.episodes.size(); ++i) {
            double cum = 0.0, cost = 0.0, urre = 0.0;
            for (const auto& st : r.episodes[i].steps) {
                const auto& rb = st.reward;
                cum += rb.reward;
                cost += rb.cost;
                urre += rb.r;
                const double n = static_cast<double>(st.step + 1);
                csv.row({r.policy, CsvWriter::num(i), CsvWriter::num(st.step), CsvWriter::num(st.day),
                         CsvWriter::num(rb.reward), CsvWriter::num(rb.s_b), CsvWriter::num(rb.zeta_s_r),
                         CsvWriter::num(rb.zeta_s_v), CsvWriter::num(rb.zeta_cost), CsvWriter::num(rb.cost),
                         CsvWriter::num(rb.r), CsvWriter::num(st.selected.size()), CsvWriter::num(cum),
                         CsvWriter::num(cost / n), CsvWriter::num(urre / n)});
            }
        }
}

}  // namespace gridpatch
