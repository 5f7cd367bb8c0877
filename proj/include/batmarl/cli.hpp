#pragma once

#include <cstdint>
#include <fstream>
#include <iosfwd>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "batmarl/attack.hpp"
#include "batmarl/baselines.hpp"
#include "batmarl/env.hpp"

namespace batmarl {

// Configuration problems exit with status 2; other failures with status 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

enum class Method { bat, intent, backdoorl_5, backdoorl_10, ablation_random_obs };

Method parse_method(const std::string& name);
const char* method_name(Method method);

struct NetworkConfig {
    int qmix_hidden = 64;
    int mixing_embed = 32;
    int rnd_hidden = 128;
    int rnd_out = 64;
    int trigger_hidden = 64;
    int value_hidden = 128;
    // Applied to every optimizer (QMIX, novelty memorizer, trigger policy
    // and value, behavior cloning).
    double learning_rate = 5e-4;

    void validate() const;
};

// One JSON document drives one method. Sections: environment, training,
// networks, intent, backdoorl; top-level keys: method, seeds, output_dir,
// dump_episodes. Unknown keys are rejected; omitted optional sections keep
// the defaults shown by serialize_run_config.
struct RunConfig {
    CoopGridConfig environment;
    AttackConfig training;  // random_observation_rewards is owned by `method`
    int adversary_index = 0;
    int eval_episodes = 128;
    NetworkConfig networks;
    IntentConfig intent;
    BackdoorlConfig backdoorl;  // n_tri is owned by `method`
    Method method = Method::bat;
    std::vector<uint64_t> seeds;
    std::string output_dir;
    bool dump_episodes = false;

    void validate() const;
};

// Canonical form: every key emitted, keys sorted, two-space indent. A parse
// of the output reproduces the config exactly.
std::string serialize_run_config(const RunConfig& cfg);
RunConfig parse_run_config(const std::string& text);
// Reads the file; syntax errors carry "line N" positions.
RunConfig load_run_config(const std::string& path);

// The training section with the method folded in: ablation_random_obs turns
// the random-observation-reward flag on, everything else leaves it off.
AttackConfig resolved_training(const RunConfig& cfg);
// The cloning section with the method's trigger length folded in.
BackdoorlConfig resolved_backdoorl(const RunConfig& cfg);

uint64_t fnv1a64(std::string_view bytes);
// Hex FNV-1a of the canonical config text.
std::string config_hash(const RunConfig& cfg);
// JSON manifest: config hash, seed, combined run hash, method, revision.
std::string run_manifest(const RunConfig& cfg, uint64_t seed);
// Compile-time revision string ("unknown" outside a git checkout).
const char* build_revision();

// `output_dir` resolved against the BATMARL_OUTPUT_ROOT environment variable
// when it is set and the directory is relative.
std::string effective_output_dir(const RunConfig& cfg);

// Shortest round-trip decimal form.
std::string format_double(double v);
std::string format_metrics_row(const MetricsRow& row);

// Append-only CSV writer with the fixed metrics header; every record is
// flushed, so a crash leaves a valid prefix. Appending to an existing file
// requires its header to match.
class MetricsSink {
public:
    explicit MetricsSink(const std::string& path);
    void write(const MetricsRow& row);
    const std::string& path() const { return path_; }

private:
    std::string path_;
    std::ofstream out_;
};

// One episode as a single JSON line.
std::string episode_to_jsonl(const Episode& ep);

// Checkpoints store every parameter (live and target) of the modules passed;
// null modules are omitted. Loading requires the stored name/shape sequence
// to match the module exactly and restores values bit for bit.
void save_checkpoint_file(const std::string& path, const std::string& tag, QmixLearner* learner,
                          TriggerModule* trigger, RndModule* rnd);
void load_checkpoint_file(const std::string& path, QmixLearner* learner, TriggerModule* trigger,
                          RndModule* rnd);
// Module names stored in a checkpoint file ("learner", "trigger", "rnd").
std::vector<std::string> checkpoint_modules(const std::string& path);

struct GradCheckLine {
    std::string architecture;
    double max_rel_err = 0.0;
    int entries = 0;
    bool pass = false;
};

// Finite-difference verification of all six architectures (agent Q net,
// adversary Q net, mixing net, novelty memorizer, trigger policy, value
// baseline) on synthetic batches.
std::vector<GradCheckLine> run_gradient_suite(int trials, int entries_per_param, uint64_t seed);

// `batmarl <train|eval|gradcheck|aggregate> ...`; returns the process exit
// status (0 success, 1 runtime failure, 2 config/usage failure).
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace batmarl
