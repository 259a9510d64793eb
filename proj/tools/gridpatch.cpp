// gridpatch: data generation, forecaster training and evaluation, dispatcher
// training, evaluation and ablations. Every command reads its inputs from and
// writes its outputs to the --out directory.
//
// Exit codes: 0 success, 1 validation failure, 2 IO failure.

#include <cstdio>
#include <filesystem>
#include <iostream>

#include <CLI11.hpp>

#include "gridpatch/run.hpp"

namespace fs = std::filesystem;
using namespace gridpatch;

namespace {

struct Common {
    std::optional<std::uint64_t> seed;
    std::string out = "run";
    std::string config;
    std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--seed", c.seed, "Master seed (overrides the config file)");
    cmd->add_option("--out", c.out, "Working directory for inputs and outputs")->capture_default_str();
    cmd->add_option("--config", c.config, "Key-value config file");
    cmd->add_option("--set", c.overrides, "Override one config key, as key=value")->take_all();
}

RunConfig resolve(const Common& c) {
    RunConfig cfg;
    if (!c.config.empty()) load_config_file(cfg, c.config);
    for (const auto& kv : c.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (c.seed) cfg.seed = *c.seed;
    cfg.resolve();
    cfg.validate();
    return cfg;
}

fs::path prepare_out(const Common& c) {
    const fs::path dir(c.out);
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec || !fs::is_directory(dir)) throw ArtifactError("cannot create output directory " + dir.string());
    return dir;
}

/// Writes <command>.config beside the outputs.
std::string write_resolved(const fs::path& dir, const std::string& command, const RunConfig& cfg) {
    const std::string name = command + ".config";
    std::ofstream out(dir / name);
    if (!out) throw ArtifactError("cannot write " + (dir / name).string());
    out << config_text(cfg);
    return name;
}

fs::path require(const fs::path& dir, const std::string& name, const std::string& hint) {
    const fs::path p = dir / name;
    if (!fs::exists(p)) throw ArtifactError("missing " + p.string() + " (run " + hint + " first)");
    return p;
}

RenewableSeries read_series(const fs::path& dir, const RunConfig& cfg) {
    auto s = load_series(require(dir, "series.csv", "gen-data").string());
    if (s.num_units != cfg.sizes.renewables)
        throw ConfigError("series.csv has " + std::to_string(s.num_units) + " units but case.renewables is " +
                          std::to_string(cfg.sizes.renewables));
    return s;
}

ForecastModel read_forecaster(const fs::path& path) {
    auto m = ForecastModel::from_checkpoint(load_checkpoint(path.string()));
    if (!m.trained()) throw ConfigError(path.string() + " holds an untrained forecaster");
    return m;
}

void log(const std::string& msg) { std::cerr << msg << '\n'; }

// ---------------------------------------------------------------- commands

int cmd_gen_data(const Common& c) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    save_series((dir / "series.csv").string(), make_series(cfg));
    record_in_manifest(dir, {"series.csv", write_resolved(dir, "gen-data", cfg)});
    log("wrote " + (dir / "series.csv").string());
    return 0;
}

int cmd_gen_case(const Common& c) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    const auto s = fs::exists(dir / "series.csv") ? read_series(dir, cfg) : make_series(cfg);
    save_case((dir / "case.json").string(), make_case(cfg, s));
    record_in_manifest(dir, {"case.json", write_resolved(dir, "gen-case", cfg)});
    log("wrote " + (dir / "case.json").string());
    return 0;
}

void write_forecast_history(const fs::path& path, const ForecastTrainReport& rep) {
    CsvWriter csv(path, {"epoch", "train_loss", "validation_loss"});
    for (std::size_t e = 0; e < rep.loss.size(); ++e)
        csv.row({CsvWriter::num(e + 1), CsvWriter::num(rep.loss[e]),
                 e < rep.validation.size() ? CsvWriter::num(rep.validation[e]) : ""});
}

ForecastModel train_and_save(const fs::path& dir, const RunConfig& cfg, const RenewableSeries& s) {
    ForecastModel model(cfg.forecast);
    const auto rep = train_forecaster(model, s, cfg);
    save_checkpoint((dir / "forecaster.json").string(), model.to_checkpoint());
    write_forecast_history(dir / "forecast_train.csv", rep);
    log("forecaster: best epoch " + std::to_string(rep.best_epoch) + " of " + std::to_string(rep.loss.size()));
    return model;
}

int cmd_train_forecast(const Common& c) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    const auto s = read_series(dir, cfg);
    train_and_save(dir, cfg, s);
    record_in_manifest(dir, {"forecaster.json", "forecast_train.csv", write_resolved(dir, "train-forecast", cfg)});
    return 0;
}

void write_summary_row(CsvWriter& csv, std::vector<std::string> lead, const ForecastEvalSummary& s) {
    for (auto v : {CsvWriter::num(s.windows), CsvWriter::num(s.conformer), CsvWriter::num(s.snapshot),
                   CsvWriter::num(s.persistence), CsvWriter::num(s.bound), CsvWriter::num(s.win_rate)})
        lead.push_back(v);
    csv.row(lead);
}

const std::vector<std::string> kSummaryCols{"windows", "conformer", "snapshot", "persistence", "bound", "win_rate"};

int cmd_eval_forecast(const Common& c, bool sweep, bool train_in_place) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    const auto s = read_series(dir, cfg);
    const std::size_t boundary = split_boundary(s.num_days, cfg.train_fraction);
    std::vector<std::string> written;

    if (!sweep) {
        const fs::path ck = dir / "forecaster.json";
        ForecastModel model;
        if (fs::exists(ck)) {
            model = read_forecaster(ck);
        } else if (train_in_place) {
            model = train_and_save(dir, cfg, s);
            written = {"forecaster.json", "forecast_train.csv"};
        } else {
            throw ArtifactError("missing " + ck.string() + " (run train-forecast or pass --train-in-place)");
        }
        const auto ws = evaluate_forecaster(model, s, boundary, cfg.conformer);
        write_forecast_windows(dir / "forecast_windows.csv", ws);
        auto header = kSummaryCols;
        CsvWriter csv(dir / "forecast_summary.csv", header);
        const auto sum = summarize(ws);
        write_summary_row(csv, {}, sum);
        written.insert(written.end(), {"forecast_windows.csv", "forecast_summary.csv"});
        log("conformer " + CsvWriter::num(sum.conformer) + " snapshot " + CsvWriter::num(sum.snapshot) +
            " persistence " + CsvWriter::num(sum.persistence) + " MW");
    } else {
        fs::create_directories(dir / "sweep");
        std::vector<SweepCell> cells;
        std::size_t index = 0;
        for (std::size_t len : cfg.sweep_inputs)
            for (std::size_t h : cfg.sweep_horizons) {
                const auto cc = sweep_cell_config(cfg, len, h, index++);
                const std::string tag = "L" + std::to_string(len) + "_H" + std::to_string(h);
                const fs::path ck = dir / "sweep" / ("forecaster_" + tag + ".json");
                ForecastModel model;
                if (fs::exists(ck)) {
                    model = read_forecaster(ck);
                    if (model.config().input_len != len || model.config().horizon != h)
                        throw ConfigError(ck.string() + " does not match its sweep cell");
                } else if (train_in_place) {
                    model = ForecastModel(cc.forecast);
                    train_forecaster(model, s, cc);
                    save_checkpoint(ck.string(), model.to_checkpoint());
                } else {
                    throw ArtifactError("missing " + ck.string() + " (pass --train-in-place to train sweep models)");
                }
                const auto ws = evaluate_forecaster(model, s, boundary, cc.conformer);
                write_forecast_windows(dir / "sweep" / ("windows_" + tag + ".csv"), ws);
                cells.push_back({len, h, summarize(ws)});
                log("cell " + tag + ": conformer " + CsvWriter::num(cells.back().summary.conformer) + " MW");
            }
        std::vector<std::string> header{"input_len", "horizon"};
        header.insert(header.end(), kSummaryCols.begin(), kSummaryCols.end());
        CsvWriter csv(dir / "forecast_sweep.csv", header);
        for (const auto& cell : cells)
            write_summary_row(csv, {CsvWriter::num(cell.input_len), CsvWriter::num(cell.horizon)}, cell.summary);
        written.push_back("forecast_sweep.csv");
    }
    written.push_back(write_resolved(dir, sweep ? "eval-forecast-sweep" : "eval-forecast", cfg));
    record_in_manifest(dir, written);
    return 0;
}

DispatchSetup load_setup(const fs::path& dir, const RunConfig& cfg, bool need_forecaster) {
    auto s = read_series(dir, cfg);
    auto grid = load_case(require(dir, "case.json", "gen-case").string());
    std::optional<ForecastModel> model;
    if (need_forecaster) model = read_forecaster(require(dir, "forecaster.json", "train-forecast"));
    return make_dispatch_setup(cfg, std::move(grid), std::move(s), model ? &*model : nullptr);
}

int cmd_train_dispatch(const Common& c) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    auto setup = load_setup(dir, cfg, true);
    auto res = train_agent(setup.env, setup.fc(), setup.range, cfg.dispatch, [&](std::size_t e, const EpisodeRecord& r) {
        if ((e + 1) % 50 == 0)
            log("episode " + std::to_string(e + 1) + ": steps " + std::to_string(r.scores.steps) + ", reward " +
                CsvWriter::num(r.scores.total_reward));
    });
    save_checkpoint((dir / "agent.json").string(),
                    res.agent.to_checkpoint({{"forecast_rows", cfg.dispatch.forecast_rows}}));
    write_training_log(dir / "dispatch_train.csv", res.episodes);
    record_in_manifest(dir, {"agent.json", "dispatch_train.csv", write_resolved(dir, "train-dispatch", cfg)});
    return 0;
}

int cmd_eval_dispatch(const Common& c, const std::string& policy) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    const bool with_agent = policy != "random";
    std::optional<Agent> agent;
    if (with_agent) {
        agent = Agent::from_checkpoint(load_checkpoint(require(dir, "agent.json", "train-dispatch").string()), cfg.dispatch.agent);
    }
    auto setup = load_setup(dir, cfg, cfg.dispatch.forecast_rows > 0);
    if (agent && agent->state_dim() != state_length(setup.env.grid(), cfg.dispatch.forecast_rows))
        throw ConfigError("agent.json expects a state of length " + std::to_string(agent->state_dim()) +
                          " but dispatch.horizon = " + std::to_string(cfg.dispatch.forecast_rows) + " gives " +
                          std::to_string(state_length(setup.env.grid(), cfg.dispatch.forecast_rows)));
    std::vector<PolicyReport> reports;
    if (with_agent)
        reports.push_back({"agent", evaluate(setup.env, &*agent, setup.fc(), setup.eval_days, cfg.dispatch,
                                             PolicyKind::greedy, cfg.seed)});
    if (policy != "agent")
        reports.push_back({"random", evaluate(setup.env, nullptr, setup.fc(), setup.eval_days, cfg.dispatch,
                                              PolicyKind::random, cfg.seed)});
    write_dispatch_summary(dir / "dispatch_summary.csv", reports);
    write_dispatch_trace(dir / "dispatch_trace.csv", reports);
    for (const auto& r : reports)
        log(r.policy + ": mean total reward " + CsvWriter::num(mean_scores(r.episodes).total_reward));
    record_in_manifest(dir, {"dispatch_summary.csv", "dispatch_trace.csv", write_resolved(dir, "eval-dispatch", cfg)});
    return 0;
}

int cmd_ablate(const Common& c) {
    const auto cfg = resolve(c);
    const auto dir = prepare_out(c);
    auto setup = load_setup(dir, cfg, true);
    const std::size_t n_gen = setup.env.grid().generators.size();
    struct Variant {
        std::string name;
        std::size_t rows, n_dis;
    };
    const std::vector<Variant> variants{{"long-horizon", cfg.conformer.length, cfg.dispatch.necessity.n_dis},
                                        {"next-day", 1, cfg.dispatch.necessity.n_dis},
                                        {"no-forecast", 0, cfg.dispatch.necessity.n_dis},
                                        {"no-necessity", cfg.conformer.length, n_gen}};
    CsvWriter table(dir / "ablation.csv",
                    {"variant", "horizon", "n_dis", "steps", "security", "avg_cost", "avg_urre", "total_reward"});
    CsvWriter train_log(dir / "ablation_train.csv",
                        {"variant", "episode", "steps", "total_reward", "security", "avg_cost", "avg_urre"});
    auto add = [&](const std::string& name, std::size_t rows, std::size_t n_dis, const std::vector<EpisodeRecord>& eps) {
        const auto m = mean_scores(eps);
        table.row({name, CsvWriter::num(rows), CsvWriter::num(n_dis), CsvWriter::num(m.steps), CsvWriter::num(m.security),
                   CsvWriter::num(m.avg_cost), CsvWriter::num(m.avg_urre), CsvWriter::num(m.total_reward)});
        log(name + ": mean total reward " + CsvWriter::num(m.total_reward));
    };
    for (const auto& v : variants) {
        DispatchConfig dc = cfg.dispatch;
        dc.forecast_rows = v.rows;
        dc.necessity.n_dis = v.n_dis;
        auto res = train_agent(setup.env, setup.fc(), setup.range, dc);
        for (std::size_t i = 0; i < res.episodes.size(); ++i) {
            const auto& s = res.episodes[i].scores;
            train_log.row({v.name, CsvWriter::num(i), CsvWriter::num(s.steps), CsvWriter::num(s.total_reward),
                           CsvWriter::num(s.security), CsvWriter::num(s.avg_cost), CsvWriter::num(s.avg_urre)});
        }
        add(v.name, v.rows, v.n_dis,
            evaluate(setup.env, &res.agent, setup.fc(), setup.eval_days, dc, PolicyKind::greedy, cfg.seed));
    }
    add("random", cfg.dispatch.forecast_rows, cfg.dispatch.necessity.n_dis,
        evaluate(setup.env, nullptr, setup.fc(), setup.eval_days, cfg.dispatch, PolicyKind::random, cfg.seed));
    record_in_manifest(dir, {"ablation.csv", "ablation_train.csv", write_resolved(dir, "ablate", cfg)});
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Renewable forecasting and dispatch experiments"};
    app.require_subcommand(1);
    Common common;
    bool sweep = false, train_in_place = false;
    std::string policy = "both";

    auto* gen_data = app.add_subcommand("gen-data", "Synthesize the renewable series");
    auto* gen_case = app.add_subcommand("gen-case", "Generate the grid case");
    auto* train_fc = app.add_subcommand("train-forecast", "Train the forecaster");
    auto* eval_fc = app.add_subcommand("eval-forecast", "Score forecasts against snapshot and persistence baselines");
    eval_fc->add_flag("--sweep", sweep, "Run the input-length x horizon grid");
    eval_fc->add_flag("--train-in-place", train_in_place, "Train missing models instead of failing");
    auto* train_dp = app.add_subcommand("train-dispatch", "Train the dispatch agent");
    auto* eval_dp = app.add_subcommand("eval-dispatch", "Evaluate the agent and/or a random policy");
    eval_dp->add_option("--policy", policy, "agent, random or both")
        ->check(CLI::IsMember({"agent", "random", "both"}))
        ->capture_default_str();
    auto* ablate = app.add_subcommand("ablate", "Train and evaluate the horizon and patching variants");
    for (auto* cmd : {gen_data, gen_case, train_fc, eval_fc, train_dp, eval_dp, ablate}) add_common(cmd, common);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (gen_data->parsed()) return cmd_gen_data(common);
        if (gen_case->parsed()) return cmd_gen_case(common);
        if (train_fc->parsed()) return cmd_train_forecast(common);
        if (eval_fc->parsed()) return cmd_eval_forecast(common, sweep, train_in_place);
        if (train_dp->parsed()) return cmd_train_dispatch(common);
        if (eval_dp->parsed()) return cmd_eval_dispatch(common, policy);
        if (ablate->parsed()) return cmd_ablate(common);
    } catch (const ArtifactError& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::ios_base::failure& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 1;
}
