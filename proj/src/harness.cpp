#include "parl/harness.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>

#include <json.hpp>

#include "parl/gradcheck.hpp"
#include "parl/metrics.hpp"
#include "parl/rng.hpp"

namespace parl {

namespace fs = std::filesystem;
using nlohmann::json;

int run_train(const ExperimentConfig& config, std::ostream& log) {
    try {
        config.validate();
    } catch (const std::exception& e) {
        log << "config error: " << e.what() << "\n";
        return kExitValidation;
    }
    try {
        fs::create_directories(config.run.out_dir);
        const std::string metrics_path = config.run.out_dir + "/metrics.jsonl";
        const std::string curve_path = config.run.out_dir + "/reward_curve.tsv";
        const std::string manifest_path = config.run.out_dir + "/manifest.json";

        TriModel trimodel = TriModel::init(config.model, config.run.seed);
        auto dataset = generate_dataset(config.task);
        Dataloader loader(std::move(dataset), config.batch.prompts_per_batch, config.run.shuffle,
                          mix_seed(config.run.seed, 0x64617461ull));  // "data"
        RolloutService service(config.rollout.instances, config.rollout.batch_slots,
                               config.rollout.latency, config.rollout.batching);
        Pipeline pipeline(config.pipeline_settings(), trimodel, service, loader);

        MetricsWriter metrics(metrics_path, config.run_id());
        std::ofstream curve(curve_path, std::ios::trunc);
        curve << "step\treward_mean\treward_min\treward_max\n";

        for (long step = 0; step < config.run.steps; ++step) {
            IterationReport rep = pipeline.run_iteration(config.run.mode, step);
            metrics.write_iteration(rep);
            curve << rep.step << '\t' << rep.reward_mean << '\t' << rep.reward_min << '\t'
                  << rep.reward_max << '\n';
            log << "step " << rep.step << " reward " << rep.reward_mean << " J " << rep.loss
                << " kl " << rep.kl_mean << " clip " << rep.clip_fraction << " tokens "
                << rep.tokens_trained << "\n";
        }
        curve.flush();

        save_checkpoint(config.run.out_dir + "/policy.ckpt", trimodel.policy);
        save_checkpoint(config.run.out_dir + "/old_policy.ckpt", trimodel.old_policy);
        save_checkpoint(config.run.out_dir + "/reference.ckpt", trimodel.reference);

        Manifest manifest;
        manifest.run_id = config.run_id();
        manifest.config_hash = config.config_hash();
        manifest.seed = config.run.seed;
        manifest.build_id = build_id_string();
        manifest.config_json = config.to_json_text();
        manifest.artifacts = {"metrics.jsonl", "reward_curve.tsv", "policy.ckpt",
                              "old_policy.ckpt", "reference.ckpt", "manifest.json"};
        write_manifest(manifest_path, manifest);
        log << "run complete: " << config.run.out_dir << "\n";
        return kExitOk;
    } catch (const ConfigError& e) {
        log << "config error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const StallError& e) {
        log << "pipeline stall: " << e.what() << "\n";
        return kExitRuntime;
    } catch (const std::exception& e) {
        log << "runtime error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

namespace {

// Fields that two runs must share before a numeric comparison means anything.
bool manifests_compatible(const ExperimentConfig& a, const ExperimentConfig& b,
                          std::string& why) {
    json ja = json::parse(a.to_json_text());
    json jb = json::parse(b.to_json_text());
    for (const char* section : {"model", "batch", "task", "rollout"})
        if (ja[section] != jb[section]) {
            why = std::string("section '") + section + "' differs";
            return false;
        }
    for (const char* key : {"lr", "epsilon", "beta", "granularity", "old_policy",
                            "advantage_mean_only"})
        if (ja["hyper"][key] != jb["hyper"][key]) {
            why = std::string("hyper.") + key + " differs";
            return false;
        }
    for (const char* key : {"seed", "shared_prompt", "shuffle", "steps"})
        if (ja["run"][key] != jb["run"][key]) {
            why = std::string("run.") + key + " differs";
            return false;
        }
    return true;
}

}  // namespace

int run_compare(const CompareOptions& opts, std::ostream& log) {
    try {
        Manifest ma = read_manifest(opts.run_a + "/manifest.json");
        Manifest mb = read_manifest(opts.run_b + "/manifest.json");
        ExperimentConfig ca = ExperimentConfig::from_json_text(ma.config_json);
        ExperimentConfig cb = ExperimentConfig::from_json_text(mb.config_json);
        std::string why;
        if (!manifests_compatible(ca, cb, why)) {
            log << "comparison refused: " << why << "\n";
            return kExitValidation;
        }

        auto mra = read_metrics(opts.run_a + "/metrics.jsonl");
        auto mrb = read_metrics(opts.run_b + "/metrics.jsonl");
        if (mra.size() != mrb.size()) {
            log << "comparison refused: step counts differ (" << mra.size() << " vs "
                << mrb.size() << ")\n";
            return kExitValidation;
        }
        double max_reward_delta = 0.0, max_loss_delta = 0.0;
        for (std::size_t i = 0; i < mra.size(); ++i) {
            max_reward_delta =
                std::max(max_reward_delta, std::fabs(mra[i].reward_mean - mrb[i].reward_mean));
            max_loss_delta = std::max(max_loss_delta, std::fabs(mra[i].loss - mrb[i].loss));
        }

        ModelParams pa = load_checkpoint(opts.run_a + "/policy.ckpt");
        ModelParams pb = load_checkpoint(opts.run_b + "/policy.ckpt");
        if (pa.flat().size() != pb.flat().size()) {
            log << "comparison refused: parameter layouts differ\n";
            return kExitValidation;
        }
        double max_param_rel = 0.0;
        bool bit_identical = true;
        for (std::size_t i = 0; i < pa.flat().size(); ++i) {
            double a = pa.flat()[i], b = pb.flat()[i];
            if (a != b) bit_identical = false;
            max_param_rel = std::max(max_param_rel, rel_err(a, b, 1e-8));
        }

        bool pass = max_reward_delta <= opts.tolerance && max_loss_delta <= opts.tolerance &&
                    max_param_rel <= opts.tolerance;
        log << std::setprecision(17);
        log << "steps compared:        " << mra.size() << "\n";
        log << "max reward delta:      " << max_reward_delta << "\n";
        log << "max objective delta:   " << max_loss_delta << "\n";
        log << "max param rel diff:    " << max_param_rel
            << (bit_identical ? " (bit-identical)" : "") << "\n";
        log << "tolerance:             " << opts.tolerance << "\n";
        log << (pass ? "PASS" : "FAIL") << "\n";
        return pass ? kExitOk : kExitComparison;
    } catch (const std::exception& e) {
        log << "compare error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int run_simulate(const SimulateOptions& opts, std::ostream& log) {
    try {
        std::ostringstream table;
        table << std::setprecision(9);
        if (!opts.trace_path.empty()) {
            LatencyTrace trace = load_trace(opts.trace_path);
            InferenceModel model =
                opts.continuous ? InferenceModel::continuous : InferenceModel::wave;
            SimReport sync_rep = simulate_iteration(SimMode::sync, trace, opts.train_cost,
                                                    opts.m_train, opts.sync_cost, model);
            SimReport async_rep = simulate_iteration(SimMode::async, trace, opts.train_cost,
                                                     opts.m_train, opts.sync_cost, model);
            table << "mode\tt_startup\tmakespan\ttrainer_idle\tinference_idle\n";
            table << "sync\t" << sync_rep.t_sync_startup << '\t' << sync_rep.makespan << '\t'
                  << sync_rep.trainer_idle << '\t' << sync_rep.inference_idle << '\n';
            table << "async\t" << async_rep.t_async_startup << '\t' << async_rep.makespan << '\t'
                  << async_rep.trainer_idle << '\t' << async_rep.inference_idle << '\n';
            table << "# t_sync formula = " << t_sync(trace)
                  << ", t_async formula = " << t_async(trace)
                  << ", async/sync makespan = " << async_rep.makespan / sync_rep.makespan << '\n';
        }
        if (!opts.multipliers.empty()) {
            auto reports = scaling_experiment(opts.workload, opts.multipliers);
            table << "scale\tdevices\ttokens\tmakespan\ttps\ttpspd\ttps_ratio\n";
            double prev_tps = 0.0;
            for (std::size_t i = 0; i < reports.size(); ++i) {
                const SimReport& r = reports[i];
                double ratio = prev_tps > 0.0 ? r.tps / prev_tps : 1.0;
                table << opts.multipliers[i] << '\t' << r.devices << '\t' << r.tokens << '\t'
                      << r.makespan << '\t' << r.tps << '\t' << r.tpspd << '\t' << ratio << '\n';
                prev_tps = r.tps;
            }
        }
        if (opts.trace_path.empty() && opts.multipliers.empty()) {
            log << "simulate: nothing to do (need a trace and/or a multiplier sweep)\n";
            return kExitValidation;
        }
        log << table.str();
        if (!opts.out_path.empty()) {
            std::ofstream os(opts.out_path, std::ios::trunc);
            if (!os) throw IoError("cannot open " + opts.out_path);
            os << table.str();
        }
        return kExitOk;
    } catch (const ConfigError& e) {
        log << "simulate config error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        log << "simulate error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

int run_gradcheck(const GradcheckOptions& opts, std::ostream& log) {
    try {
        if (opts.trials == 0 && !opts.with_backward_suite) {
            log << "warning: 0 trials requested; vacuous pass\n";
            return kExitOk;
        }
        bool all_passed = true;
        log << std::setprecision(6);
        if (opts.with_backward_suite) {
            ModelConfig cfg;  // default desk-scale config
            GradCheckResult r = gradcheck_backward(cfg, opts.seed, opts.threshold);
            log << "backward suite (default config): max rel err " << r.max_rel_err << " at "
                << r.worst_tensor << "[" << r.worst_index << "] -> "
                << (r.passed ? "ok" : "FAIL") << "\n";
            all_passed = all_passed && r.passed;
        }
        if (opts.trials > 0) {
            GradCheckSummary s = run_gradcheck_trials(opts.seed, opts.trials, opts.threshold,
                                                      opts.inject_fault);
            for (int i = 0; i < opts.trials; ++i) {
                const auto& r = s.results[i];
                log << "grpo trial " << i << ": max rel err " << r.max_rel_err << " at "
                    << r.worst_tensor << "[" << r.worst_index << "] -> "
                    << (r.passed ? "ok" : "FAIL") << "\n";
            }
            log << "grpo suite: max rel err " << s.max_rel_err << " over " << s.trials
                << " trials\n";
            all_passed = all_passed && s.passed;
        } else {
            log << "warning: 0 grpo trials requested\n";
        }
        log << (all_passed ? "PASS" : "FAIL") << " (threshold " << opts.threshold << ")\n";
        return all_passed ? kExitOk : kExitComparison;
    } catch (const std::exception& e) {
        log << "gradcheck error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

}  // namespace parl
