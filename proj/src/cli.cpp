#include "batmarl/cli.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "batmarl/evalmetrics.hpp"
#include "batmarl/gradcheck.hpp"
#include "batmarl/tape.hpp"
#include "json.hpp"

#ifndef BATMARL_REVISION
#define BATMARL_REVISION "unknown"
#endif

namespace batmarl {

namespace fs = std::filesystem;
using nlohmann::json;

Method parse_method(const std::string& name) {
    if (name == "bat") return Method::bat;
    if (name == "intent") return Method::intent;
    if (name == "backdoorl_5") return Method::backdoorl_5;
    if (name == "backdoorl_10") return Method::backdoorl_10;
    if (name == "ablation_random_obs") return Method::ablation_random_obs;
    throw ConfigError("unknown method '" + name +
                      "': expected bat, intent, backdoorl_5, backdoorl_10 or ablation_random_obs");
}

const char* method_name(Method method) {
    switch (method) {
        case Method::bat: return "bat";
        case Method::intent: return "intent";
        case Method::backdoorl_5: return "backdoorl_5";
        case Method::backdoorl_10: return "backdoorl_10";
        case Method::ablation_random_obs: return "ablation_random_obs";
    }
    throw std::invalid_argument("method_name: bad enum value");
}

void NetworkConfig::validate() const {
    if (qmix_hidden < 1 || mixing_embed < 1 || rnd_hidden < 1 || rnd_out < 1 ||
        trigger_hidden < 1 || value_hidden < 1)
        throw ConfigError("networks: every width must be at least 1");
    if (!(learning_rate > 0.0)) throw ConfigError("networks: learning_rate must be positive");
}

void RunConfig::validate() const {
    try {
        environment.validate();
        training.validate();
        intent.validate();
        BackdoorlConfig b = backdoorl;
        b.n_tri = 5;
        b.validate();
    } catch (const ConfigError&) {
        throw;
    } catch (const std::exception& e) {
        throw ConfigError(e.what());
    }
    networks.validate();
    if (adversary_index < 0 || adversary_index >= environment.n_agents)
        throw ConfigError("training: adversary_index out of range for the configured team");
    if (eval_episodes < 1) throw ConfigError("training: eval_episodes must be at least 1");
    if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
    if (output_dir.empty()) throw ConfigError("output_dir must not be empty");
}

namespace {

// --- config document ---------------------------------------------------

void check_keys(const json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError("'" + where + "' must be an object");
    for (const auto& item : j.items()) {
        bool known = false;
        for (const char* k : allowed) known = known || item.key() == k;
        if (!known) throw ConfigError("unknown key '" + item.key() + "' in " + where);
    }
}

template <typename T>
void read_field(const json& j, const std::string& where, const char* key, T& out) {
    auto it = j.find(key);
    if (it == j.end()) return;
    try {
        out = it->get<T>();
    } catch (const json::exception&) {
        throw ConfigError("key '" + std::string(key) + "' in " + where + " has the wrong type");
    }
}

json environment_to_json(const CoopGridConfig& g) {
    return json{{"width", g.width},
                {"height", g.height},
                {"n_agents", g.n_agents},
                {"n_targets", g.n_targets},
                {"observation_radius", g.observation_radius},
                {"episode_limit", g.episode_limit},
                {"capture_reward", g.capture_reward},
                {"win_bonus", g.win_bonus},
                {"approach_reward", g.approach_reward}};
}

void environment_from_json(const json& j, CoopGridConfig& g) {
    check_keys(j, "section 'environment'",
               {"width", "height", "n_agents", "n_targets", "observation_radius", "episode_limit",
                "capture_reward", "win_bonus", "approach_reward"});
    const std::string where = "section 'environment'";
    read_field(j, where, "width", g.width);
    read_field(j, where, "height", g.height);
    read_field(j, where, "n_agents", g.n_agents);
    read_field(j, where, "n_targets", g.n_targets);
    read_field(j, where, "observation_radius", g.observation_radius);
    read_field(j, where, "episode_limit", g.episode_limit);
    read_field(j, where, "capture_reward", g.capture_reward);
    read_field(j, where, "win_bonus", g.win_bonus);
    read_field(j, where, "approach_reward", g.approach_reward);
}

json training_to_json(const RunConfig& cfg) {
    const AttackConfig& a = cfg.training;
    return json{{"step_limit", a.step_limit},
                {"benign_period", a.benign_period},
                {"batch_size", a.batch_size},
                {"buffer_capacity", static_cast<uint64_t>(a.buffer_capacity)},
                {"target_refresh_episodes", a.target_refresh_episodes},
                {"eval_interval", a.eval_interval},
                {"abnormal_probability", a.abnormal_probability},
                {"epsilon", json{{"start", a.epsilon.start},
                                 {"finish", a.epsilon.finish},
                                 {"anneal_steps", a.epsilon.anneal_steps}}},
                {"adversary_index", cfg.adversary_index},
                {"eval_episodes", cfg.eval_episodes}};
}

void training_from_json(const json& j, RunConfig& cfg) {
    check_keys(j, "section 'training'",
               {"step_limit", "benign_period", "batch_size", "buffer_capacity",
                "target_refresh_episodes", "eval_interval", "abnormal_probability", "epsilon",
                "adversary_index", "eval_episodes"});
    const std::string where = "section 'training'";
    AttackConfig& a = cfg.training;
    read_field(j, where, "step_limit", a.step_limit);
    read_field(j, where, "benign_period", a.benign_period);
    read_field(j, where, "batch_size", a.batch_size);
    uint64_t cap = a.buffer_capacity;
    read_field(j, where, "buffer_capacity", cap);
    a.buffer_capacity = static_cast<size_t>(cap);
    read_field(j, where, "target_refresh_episodes", a.target_refresh_episodes);
    read_field(j, where, "eval_interval", a.eval_interval);
    read_field(j, where, "abnormal_probability", a.abnormal_probability);
    if (auto it = j.find("epsilon"); it != j.end()) {
        check_keys(*it, "key 'epsilon'", {"start", "finish", "anneal_steps"});
        read_field(*it, "key 'epsilon'", "start", a.epsilon.start);
        read_field(*it, "key 'epsilon'", "finish", a.epsilon.finish);
        read_field(*it, "key 'epsilon'", "anneal_steps", a.epsilon.anneal_steps);
    }
    read_field(j, where, "adversary_index", cfg.adversary_index);
    read_field(j, where, "eval_episodes", cfg.eval_episodes);
}

json networks_to_json(const NetworkConfig& n) {
    return json{{"qmix_hidden", n.qmix_hidden},     {"mixing_embed", n.mixing_embed},
                {"rnd_hidden", n.rnd_hidden},       {"rnd_out", n.rnd_out},
                {"trigger_hidden", n.trigger_hidden}, {"value_hidden", n.value_hidden},
                {"learning_rate", n.learning_rate}};
}

void networks_from_json(const json& j, NetworkConfig& n) {
    check_keys(j, "section 'networks'",
               {"qmix_hidden", "mixing_embed", "rnd_hidden", "rnd_out", "trigger_hidden",
                "value_hidden", "learning_rate"});
    const std::string where = "section 'networks'";
    read_field(j, where, "qmix_hidden", n.qmix_hidden);
    read_field(j, where, "mixing_embed", n.mixing_embed);
    read_field(j, where, "rnd_hidden", n.rnd_hidden);
    read_field(j, where, "rnd_out", n.rnd_out);
    read_field(j, where, "trigger_hidden", n.trigger_hidden);
    read_field(j, where, "value_hidden", n.value_hidden);
    read_field(j, where, "learning_rate", n.learning_rate);
}

}  // namespace

std::string serialize_run_config(const RunConfig& cfg) {
    json j;
    j["environment"] = environment_to_json(cfg.environment);
    j["training"] = training_to_json(cfg);
    j["networks"] = networks_to_json(cfg.networks);
    j["intent"] = json{{"rate_window", static_cast<uint64_t>(cfg.intent.rate_window)}};
    j["backdoorl"] = json{{"p_tri", cfg.backdoorl.p_tri},
                          {"clone_epochs", cfg.backdoorl.clone_epochs},
                          {"pretrain_steps", cfg.backdoorl.pretrain_steps},
                          {"collect_episodes", cfg.backdoorl.collect_episodes},
                          {"eval_episodes", cfg.backdoorl.eval_episodes}};
    j["method"] = method_name(cfg.method);
    j["seeds"] = cfg.seeds;
    j["output_dir"] = cfg.output_dir;
    j["dump_episodes"] = cfg.dump_episodes;
    return j.dump(2) + "\n";
}

RunConfig parse_run_config(const std::string& text) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::parse_error& e) {
        long line = 1;
        for (size_t i = 0; i < e.byte && i < text.size(); ++i)
            if (text[i] == '\n') ++line;
        throw ConfigError("line " + std::to_string(line) + ": " + e.what());
    }
    check_keys(j, "the config",
               {"environment", "training", "networks", "intent", "backdoorl", "method", "seeds",
                "output_dir", "dump_episodes"});

    RunConfig cfg;
    if (!j.contains("environment")) throw ConfigError("missing section 'environment'");
    environment_from_json(j["environment"], cfg.environment);
    if (auto it = j.find("training"); it != j.end()) training_from_json(*it, cfg);
    if (auto it = j.find("networks"); it != j.end()) networks_from_json(*it, cfg.networks);
    if (auto it = j.find("intent"); it != j.end()) {
        check_keys(*it, "section 'intent'", {"rate_window"});
        uint64_t w = cfg.intent.rate_window;
        read_field(*it, "section 'intent'", "rate_window", w);
        cfg.intent.rate_window = static_cast<size_t>(w);
    }
    if (auto it = j.find("backdoorl"); it != j.end()) {
        check_keys(*it, "section 'backdoorl'",
                   {"p_tri", "clone_epochs", "pretrain_steps", "collect_episodes", "eval_episodes"});
        const std::string where = "section 'backdoorl'";
        read_field(*it, where, "p_tri", cfg.backdoorl.p_tri);
        read_field(*it, where, "clone_epochs", cfg.backdoorl.clone_epochs);
        read_field(*it, where, "pretrain_steps", cfg.backdoorl.pretrain_steps);
        read_field(*it, where, "collect_episodes", cfg.backdoorl.collect_episodes);
        read_field(*it, where, "eval_episodes", cfg.backdoorl.eval_episodes);
    }
    if (!j.contains("method")) throw ConfigError("missing key 'method'");
    std::string method;
    read_field(j, "the config", "method", method);
    cfg.method = parse_method(method);
    if (!j.contains("seeds")) throw ConfigError("missing key 'seeds'");
    read_field(j, "the config", "seeds", cfg.seeds);
    if (!j.contains("output_dir")) throw ConfigError("missing key 'output_dir'");
    read_field(j, "the config", "output_dir", cfg.output_dir);
    read_field(j, "the config", "dump_episodes", cfg.dump_episodes);
    cfg.validate();
    return cfg;
}

RunConfig load_run_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file: " + path);
    std::ostringstream text;
    text << in.rdbuf();
    try {
        return parse_run_config(text.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

AttackConfig resolved_training(const RunConfig& cfg) {
    AttackConfig a = cfg.training;
    a.random_observation_rewards = cfg.method == Method::ablation_random_obs;
    return a;
}

BackdoorlConfig resolved_backdoorl(const RunConfig& cfg) {
    BackdoorlConfig b = cfg.backdoorl;
    b.n_tri = cfg.method == Method::backdoorl_10 ? 10 : 5;
    b.clone_optim.learning_rate = cfg.networks.learning_rate;
    return b;
}

uint64_t fnv1a64(std::string_view bytes) {
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

namespace {

std::string hex64(uint64_t v) {
    static const char digits[] = "0123456789abcdef";
    std::string out(16, '0');
    for (int i = 15; i >= 0; --i) {
        out[static_cast<size_t>(i)] = digits[v & 0xf];
        v >>= 4;
    }
    return out;
}

}  // namespace

std::string config_hash(const RunConfig& cfg) { return hex64(fnv1a64(serialize_run_config(cfg))); }

std::string run_manifest(const RunConfig& cfg, uint64_t seed) {
    std::string canonical = serialize_run_config(cfg);
    json j;
    j["config_hash"] = hex64(fnv1a64(canonical));
    j["run_hash"] = hex64(fnv1a64(canonical + ":" + std::to_string(seed)));
    j["seed"] = seed;
    j["method"] = method_name(cfg.method);
    j["revision"] = build_revision();
    return j.dump(2) + "\n";
}

const char* build_revision() { return BATMARL_REVISION; }

std::string effective_output_dir(const RunConfig& cfg) {
    const char* root = std::getenv("BATMARL_OUTPUT_ROOT");
    if (root && *root && fs::path(cfg.output_dir).is_relative())
        return (fs::path(root) / cfg.output_dir).string();
    return cfg.output_dir;
}

std::string format_double(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

std::string format_metrics_row(const MetricsRow& row) {
    std::string out = std::to_string(row.step);
    for (double v : {row.benign_win_rate, row.abnormal_fail_rate, row.mean_trigger_count,
                     row.qmix_loss, row.rnd_loss, row.trigger_loss, row.value_loss, row.diff_obs}) {
        out += ',';
        out += format_double(v);
    }
    return out;
}

MetricsSink::MetricsSink(const std::string& path) : path_(path) {
    std::string first;
    bool has_content = false;
    {
        std::ifstream existing(path_);
        has_content = existing && std::getline(existing, first) && !first.empty();
    }
    if (has_content && first != metrics_csv_header())
        throw std::runtime_error("metrics file has a foreign header: " + path_);
    out_.open(path_, std::ios::app);
    if (!out_) throw std::runtime_error("cannot open metrics file: " + path_);
    if (!has_content) {
        out_ << metrics_csv_header() << '\n' << std::flush;
        if (!out_) throw std::runtime_error("metrics write failed: " + path_);
    }
}

void MetricsSink::write(const MetricsRow& row) {
    out_ << format_metrics_row(row) << '\n' << std::flush;
    if (!out_) throw std::runtime_error("metrics write failed: " + path_);
}

std::string episode_to_jsonl(const Episode& ep) {
    json steps = json::array();
    for (size_t t = 0; t < ep.steps.size(); ++t) {
        const EpisodeStep& s = ep.steps[t];
        steps.push_back(json{{"t", t},
                             {"state", s.state},
                             {"obs", s.obs},
                             {"actions", s.actions},
                             {"d", s.d},
                             {"eff", s.eff},
                             {"r", s.reward}});
    }
    json j{{"serial", ep.serial}, {"y", ep.y}, {"won", ep.won}, {"steps", std::move(steps)}};
    return j.dump();
}

// --- checkpoints ---------------------------------------------------------

namespace {

json params_to_json(const std::vector<Parameter*>& params, const std::string& module) {
    json arr = json::array();
    for (const Parameter* p : params) {
        for (double v : p->value.values)
            if (!std::isfinite(v))
                throw std::runtime_error("checkpoint: non-finite value in " + module + " parameter " +
                                         p->name);
        arr.push_back(json{{"name", p->name}, {"shape", p->value.shape}, {"values", p->value.values}});
    }
    return arr;
}

void params_from_json(const json& arr, const std::vector<Parameter*>& params,
                      const std::string& module) {
    if (!arr.is_array() || arr.size() != params.size())
        throw std::runtime_error("checkpoint: " + module + " parameter count mismatch");
    for (size_t i = 0; i < params.size(); ++i) {
        const json& e = arr[i];
        if (e.at("name").get<std::string>() != params[i]->name)
            throw std::runtime_error("checkpoint: " + module + " expects parameter '" +
                                     params[i]->name + "', file has '" +
                                     e.at("name").get<std::string>() + "'");
        if (e.at("shape").get<std::vector<int>>() != params[i]->value.shape)
            throw std::runtime_error("checkpoint: shape mismatch for " + module + " parameter " +
                                     params[i]->name);
        std::vector<double> values = e.at("values").get<std::vector<double>>();
        if (values.size() != params[i]->value.values.size())
            throw std::runtime_error("checkpoint: value count mismatch for " + module +
                                     " parameter " + params[i]->name);
        params[i]->value.values = std::move(values);
    }
}

json load_checkpoint_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error("checkpoint " + path + ": " + e.what());
    }
}

}  // namespace

void save_checkpoint_file(const std::string& path, const std::string& tag, QmixLearner* learner,
                          TriggerModule* trigger, RndModule* rnd) {
    json modules;
    if (learner) modules["learner"] = params_to_json(learner->all_parameters(), "learner");
    if (trigger) modules["trigger"] = params_to_json(trigger->parameters(), "trigger");
    if (rnd) modules["rnd"] = params_to_json(rnd->parameters(), "rnd");
    json j{{"tag", tag}, {"modules", std::move(modules)}};
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot create checkpoint: " + path);
    out << j.dump() << '\n' << std::flush;
    if (!out) throw std::runtime_error("checkpoint write failed: " + path);
}

void load_checkpoint_file(const std::string& path, QmixLearner* learner, TriggerModule* trigger,
                          RndModule* rnd) {
    json j = load_checkpoint_json(path);
    const json& modules = j.at("modules");
    auto restore = [&](const char* name, const std::vector<Parameter*>& params) {
        if (!modules.contains(name))
            throw std::runtime_error("checkpoint " + path + " has no " + name + " module");
        params_from_json(modules[name], params, name);
    };
    if (learner) restore("learner", learner->all_parameters());
    if (trigger) restore("trigger", trigger->parameters());
    if (rnd) restore("rnd", rnd->parameters());
}

std::vector<std::string> checkpoint_modules(const std::string& path) {
    json j = load_checkpoint_json(path);
    std::vector<std::string> names;
    for (const auto& item : j.at("modules").items()) names.push_back(item.key());
    return names;
}

// --- gradient suite ------------------------------------------------------

namespace {

DecPomdpSpec synth_spec() {
    DecPomdpSpec spec;
    spec.n_agents = 3;
    spec.action_counts = {4, 4, 4};
    spec.observation_width = 6;
    spec.state_width = 5;
    spec.episode_limit = 6;
    return spec;
}

Episode synth_episode(const DecPomdpSpec& spec, int length, uint64_t serial, bool abnormal,
                      std::mt19937_64& rng) {
    std::uniform_real_distribution<double> real(-1.0, 1.0);
    std::uniform_int_distribution<int> action(0, spec.action_counts[0] - 1);
    auto vec = [&](int n) {
        std::vector<double> v(static_cast<size_t>(n));
        for (double& x : v) x = real(rng);
        return v;
    };
    auto obs_all = [&] {
        std::vector<std::vector<double>> o;
        for (int a = 0; a < spec.n_agents; ++a) o.push_back(vec(spec.observation_width));
        return o;
    };
    Episode ep;
    ep.serial = serial;
    ep.y = abnormal ? 1 : 0;
    int trigger_at = abnormal ? std::uniform_int_distribution<int>(0, length - 1)(rng) : -1;
    for (int t = 0; t < length; ++t) {
        EpisodeStep s;
        s.state = vec(spec.state_width);
        s.obs = obs_all();
        for (int a = 0; a < spec.n_agents; ++a) s.actions.push_back(action(rng));
        s.d = t == trigger_at ? 1 : 0;
        s.eff = s.d & ep.y;
        s.reward = real(rng);
        ep.steps.push_back(std::move(s));
    }
    ep.final_state = vec(spec.state_width);
    ep.final_obs = obs_all();
    return ep;
}

GradCheckResult worse(GradCheckResult a, const GradCheckResult& b) {
    if (b.max_rel_err > a.max_rel_err) {
        a.max_rel_err = b.max_rel_err;
        a.worst = b.worst;
    }
    a.entries_checked += b.entries_checked;
    return a;
}

std::vector<Parameter*> trainable(std::vector<Parameter*> params) {
    params.erase(std::remove_if(params.begin(), params.end(),
                                [](const Parameter* p) { return !p->trainable; }),
                 params.end());
    return params;
}

}  // namespace

std::vector<GradCheckLine> run_gradient_suite(int trials, int entries_per_param, uint64_t seed) {
    if (trials < 1) throw std::invalid_argument("run_gradient_suite: need at least one trial");
    std::mt19937_64 rng(seed);
    DecPomdpSpec spec = synth_spec();
    std::array<GradCheckResult, 6> results{};

    for (int trial = 0; trial < trials; ++trial) {
        QmixConfig qc;
        qc.hidden = 5;
        qc.mixing_embed = 4;
        qc.adversary_index = 1;
        QmixLearner learner(spec, qc, rng());
        std::vector<Episode> eps;
        eps.push_back(synth_episode(spec, 6, 0, true, rng));
        eps.push_back(synth_episode(spec, 4, 1, true, rng));
        eps.push_back(synth_episode(spec, 2, 2, true, rng));
        std::vector<const Episode*> ptrs{&eps[0], &eps[1], &eps[2]};
        TrainBatch batch = build_train_batch(ptrs, true);
        auto qmix_run = [&](bool backward) {
            return backward ? learner.update_backward_only(batch) : learner.loss_only(batch);
        };
        std::vector<Parameter*> q_params;
        for (int a = 0; a < spec.n_agents; ++a) {
            if (a == qc.adversary_index) continue;
            for (Parameter* p : learner.teammate(a).parameters()) q_params.push_back(p);
        }
        results[0] = worse(results[0], finite_diff_check(q_params, qmix_run, entries_per_param, rng));
        results[1] = worse(results[1], finite_diff_check(learner.adversary().parameters(), qmix_run,
                                                         entries_per_param, rng));
        results[2] = worse(results[2], finite_diff_check(learner.mixer().parameters(), qmix_run,
                                                         entries_per_param, rng));

        RndConfig rc;
        rc.hidden = 7;
        rc.out = 5;
        RndModule rnd(spec.observation_width, rc, rng());
        std::uniform_real_distribution<double> real(-1.0, 1.0);
        Tensor rows = Tensor::zeros({8, spec.observation_width});
        for (double& v : rows.values) v = real(rng);
        auto rnd_run = [&](bool backward) {
            return backward ? rnd.update_backward_only(rows) : rnd.loss_only(rows);
        };
        results[3] = worse(results[3], finite_diff_check(trainable(rnd.parameters()), rnd_run,
                                                         entries_per_param, rng));

        TriggerConfig tc;
        tc.hidden = 5;
        tc.value_hidden = 6;
        tc.n_agents = spec.n_agents;
        tc.adversary_index = qc.adversary_index;
        TriggerModule trigger(spec.observation_width, spec.state_width, tc, rng());
        std::vector<Episode> teps;
        teps.push_back(synth_episode(spec, 5, 0, true, rng));
        teps.push_back(synth_episode(spec, 3, 1, true, rng));
        std::vector<const Episode*> tptrs{&teps[0], &teps[1]};
        std::vector<TriggerRewardSeries> rewards;
        for (const Episode* ep : tptrs) {
            TriggerRewardSeries series;
            series.alpha = 0.1;
            for (int t = 0; t < ep->length(); ++t) series.rewards.push_back(real(rng));
            rewards.push_back(std::move(series));
        }
        auto policy_run = [&](bool backward) {
            return backward ? trigger.reinforce_backward_only(tptrs, rewards)
                            : trigger.reinforce_loss_only(tptrs, rewards);
        };
        auto value_run = [&](bool backward) {
            return backward ? trigger.value_backward_only(tptrs, rewards)
                            : trigger.value_loss_only(tptrs, rewards);
        };
        results[4] = worse(results[4], finite_diff_check(trigger.policy().parameters(), policy_run,
                                                         entries_per_param, rng));
        results[5] = worse(results[5], finite_diff_check(trigger.value_net().parameters(), value_run,
                                                         entries_per_param, rng));
    }

    static const char* names[6] = {"q_net",  "adversary_net",  "mixing_net",
                                   "rnd",    "trigger_policy", "value_baseline"};
    std::vector<GradCheckLine> lines;
    for (size_t i = 0; i < results.size(); ++i) {
        GradCheckLine line;
        line.architecture = names[i];
        line.max_rel_err = results[i].max_rel_err;
        line.entries = results[i].entries_checked;
        line.pass = results[i].passed();
        lines.push_back(std::move(line));
    }
    return lines;
}

// --- commands ------------------------------------------------------------

namespace {

uint64_t mix_seed(uint64_t a, uint64_t b) {
    uint64_t z = a + 0x9e3779b97f4a7c15ull * (b + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path);
    out << text << std::flush;
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

int cmd_train(const std::string& config_path, std::ostream& out) {
    RunConfig rc = load_run_config(config_path);
    AttackConfig training = resolved_training(rc);
    fs::path root = effective_output_dir(rc);

    for (uint64_t seed : rc.seeds) {
        fs::path dir = root / ("seed" + std::to_string(seed));
        fs::create_directories(dir);
        write_text_file(dir / "config.json", serialize_run_config(rc));
        write_text_file(dir / "manifest.json", run_manifest(rc, seed));
        MetricsSink sink((dir / "metrics.csv").string());
        std::ofstream dumps;
        if (rc.dump_episodes) {
            dumps.open(dir / "episodes.jsonl", std::ios::app);
            if (!dumps) throw std::runtime_error("cannot open episode dump in " + dir.string());
        }

        CoopGrid env(rc.environment), eval_env(rc.environment);
        const DecPomdpSpec spec = env.spec();
        QmixConfig qc;
        qc.hidden = rc.networks.qmix_hidden;
        qc.mixing_embed = rc.networks.mixing_embed;
        qc.adversary_index = rc.adversary_index;
        qc.optim.learning_rate = rc.networks.learning_rate;
        QmixLearner learner(spec, qc, mix_seed(seed, 1));
        RndConfig rcnd;
        rcnd.hidden = rc.networks.rnd_hidden;
        rcnd.out = rc.networks.rnd_out;
        rcnd.optim.learning_rate = rc.networks.learning_rate;
        RndModule rnd(spec.observation_width, rcnd, mix_seed(seed, 2));
        TriggerConfig tc;
        tc.hidden = rc.networks.trigger_hidden;
        tc.value_hidden = rc.networks.value_hidden;
        tc.n_agents = spec.n_agents;
        tc.adversary_index = rc.adversary_index;
        tc.policy_optim.learning_rate = rc.networks.learning_rate;
        tc.value_optim.learning_rate = rc.networks.learning_rate;
        TriggerModule trigger(spec.observation_width, spec.state_width, tc, mix_seed(seed, 3));

        bool trigger_in_checkpoint =
            rc.method == Method::bat || rc.method == Method::ablation_random_obs;
        RunHooks hooks;
        hooks.on_metrics = [&](const MetricsRow& row) { sink.write(row); };
        if (rc.dump_episodes)
            hooks.on_episode = [&](const Episode& ep) {
                dumps << episode_to_jsonl(ep) << '\n' << std::flush;
                if (!dumps) throw std::runtime_error("episode dump write failed");
            };
        hooks.save_checkpoint = [&](const std::string& tag) {
            save_checkpoint_file((dir / ("checkpoint_" + tag + ".json")).string(), tag, &learner,
                                 trigger_in_checkpoint ? &trigger : nullptr, &rnd);
        };
        hooks.save_resume_state = [&](const RunState& st) {
            json j{{"t_total", st.t_total}, {"episodes", st.episodes}, {"rng_state", st.rng_state}};
            write_text_file(dir / "resume.json", j.dump(2) + "\n");
        };
        auto eval_seed = [&](long step) { return mix_seed(mix_seed(seed, 4), static_cast<uint64_t>(step)); };

        RunResult result;
        switch (rc.method) {
            case Method::bat:
            case Method::ablation_random_obs:
                hooks.evaluate = [&](long step) {
                    return training_snapshot(eval_env, learner, trigger, rnd, rc.eval_episodes,
                                             eval_seed(step));
                };
                result = run_attack(env, learner, rnd, trigger, training, hooks, mix_seed(seed, 5));
                break;
            case Method::intent:
                hooks.evaluate = [&](long step) {
                    uint64_t s = eval_seed(step);
                    TeamPolicy team = team_policy(learner);
                    ForcedTriggerDriver none(0);
                    std::vector<Episode> benign =
                        run_episodes(eval_env, team, none, 0, rc.eval_episodes, s);
                    RandomStepTriggerDriver one_step;
                    std::vector<Episode> abnormal =
                        run_episodes(eval_env, team, one_step, 1, rc.eval_episodes, mix_seed(s, 1));
                    std::vector<const Episode*> bp, ap;
                    for (const Episode& ep : benign) bp.push_back(&ep);
                    for (const Episode& ep : abnormal) ap.push_back(&ep);
                    EvalSnapshot snap;
                    snap.benign_win_rate = summarize(benign).win_rate;
                    EvalReport ab = summarize(abnormal);
                    snap.abnormal_fail_rate = ab.fail_rate;
                    snap.mean_trigger_count = ab.mean_trigger_count;
                    int adv = learner.adversary_index();
                    snap.diff_obs = diff_obs_metric(
                        rnd, teammate_observations(bp, adv, spec.n_agents, spec.observation_width),
                        teammate_observations(ap, adv, spec.n_agents, spec.observation_width));
                    return snap;
                };
                result = run_intent(env, learner, rnd, training, rc.intent, hooks, mix_seed(seed, 5));
                break;
            case Method::backdoorl_5:
            case Method::backdoorl_10:
                result = run_backdoorl(env, learner, rnd, training, resolved_backdoorl(rc), hooks,
                                       mix_seed(seed, 5));
                break;
        }
        out << "seed " << seed << ": " << result.t_total << " steps over " << result.episodes
            << " episodes -> " << dir.string() << '\n';
    }
    return 0;
}

int cmd_eval(const std::string& run_dir, const std::string& setting_str, const std::string& mode_str,
             int n_episodes, uint64_t seed, std::ostream& out) {
    EvalSetting setting;
    EvalMode mode;
    try {
        setting = parse_setting(setting_str);
        mode = parse_mode(mode_str);
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    if (n_episodes < 1) throw ConfigError("--n must be at least 1");

    RunConfig rc;
    try {
        rc = load_run_config((fs::path(run_dir) / "config.json").string());
    } catch (const ConfigError& e) {
        throw std::runtime_error(std::string("run directory unusable: ") + e.what());
    }

    CoopGrid env(rc.environment);
    const DecPomdpSpec spec = env.spec();
    QmixConfig qc;
    qc.hidden = rc.networks.qmix_hidden;
    qc.mixing_embed = rc.networks.mixing_embed;
    qc.adversary_index = rc.adversary_index;
    TriggerConfig tc;
    tc.hidden = rc.networks.trigger_hidden;
    tc.value_hidden = rc.networks.value_hidden;
    tc.n_agents = spec.n_agents;
    tc.adversary_index = rc.adversary_index;

    // Slots stay empty when the corresponding checkpoint (or its trigger
    // module) is absent; evaluate() reports exactly which one it needed.
    QmixLearner benign_learner(spec, qc, 0), backdoor_learner(spec, qc, 0);
    TriggerModule benign_trigger(spec.observation_width, spec.state_width, tc, 0);
    TriggerModule backdoor_trigger(spec.observation_width, spec.state_width, tc, 0);
    EvalBundle bundle;
    auto load_slot = [&](const char* tag, QmixLearner& learner, TriggerModule& trigger,
                         QmixLearner*& learner_slot, TriggerModule*& trigger_slot) {
        fs::path path = fs::path(run_dir) / (std::string("checkpoint_") + tag + ".json");
        if (!fs::exists(path)) return;
        std::vector<std::string> modules = checkpoint_modules(path.string());
        bool has_trigger = std::find(modules.begin(), modules.end(), "trigger") != modules.end();
        load_checkpoint_file(path.string(), &learner, has_trigger ? &trigger : nullptr, nullptr);
        learner_slot = &learner;
        if (has_trigger) trigger_slot = &trigger;
    };
    load_slot("benign", benign_learner, benign_trigger, bundle.benign_learner, bundle.benign_trigger);
    load_slot("final", backdoor_learner, backdoor_trigger, bundle.backdoor_learner,
              bundle.backdoor_trigger);
    if (!bundle.benign_learner && !bundle.backdoor_learner)
        throw std::runtime_error("no checkpoints found in " + run_dir);

    EvalReport report = evaluate(env, bundle, setting, mode, n_episodes, seed);
    out << "setting=" << setting_name(setting) << " mode=" << mode_name(mode)
        << " episodes=" << report.episodes << " win_rate=" << format_double(report.win_rate)
        << " fail_rate=" << format_double(report.fail_rate)
        << " mean_return=" << format_double(report.mean_return)
        << " std_return=" << format_double(report.std_return)
        << " mean_trigger_count=" << format_double(report.mean_trigger_count) << '\n';

    json summary{{"setting", setting_name(setting)},
                 {"mode", mode_name(mode)},
                 {"episodes", report.episodes},
                 {"win_rate", report.win_rate},
                 {"fail_rate", report.fail_rate},
                 {"mean_return", report.mean_return},
                 {"std_return", report.std_return},
                 {"mean_trigger_count", report.mean_trigger_count},
                 {"seed", seed}};
    write_text_file(fs::path(run_dir) / (std::string("eval_") + setting_name(setting) + "_" +
                                         mode_name(mode) + ".json"),
                    summary.dump(2) + "\n");
    return 0;
}

int cmd_gradcheck(const std::string& corrupt_op, int trials, std::ostream& out) {
    if (!corrupt_op.empty()) {
        out << "corrupt fixture active: backward rule of '" << corrupt_op << "' is scaled\n";
        Tape::corrupt_backward(corrupt_op);
    }
    std::vector<GradCheckLine> lines;
    try {
        lines = run_gradient_suite(trials, 4, 97);
    } catch (const std::exception& e) {
        Tape::corrupt_backward("");
        out << "gradient suite error: " << e.what() << '\n';
        return 1;
    }
    Tape::corrupt_backward("");
    bool all_pass = true;
    for (const GradCheckLine& line : lines) {
        all_pass = all_pass && line.pass;
        out << line.architecture;
        for (size_t i = line.architecture.size(); i < 16; ++i) out << ' ';
        out << "max_rel_err=" << format_double(line.max_rel_err) << " entries=" << line.entries
            << (line.pass ? "  PASS" : "  FAIL") << '\n';
    }
    out << (all_pass ? "gradient suite passed\n" : "gradient suite FAILED\n");
    return all_pass ? 0 : 1;
}

int cmd_aggregate(const std::vector<std::string>& dirs, const std::string& out_path,
                  std::ostream& out) {
    std::vector<std::string> columns;
    {
        std::istringstream header(metrics_csv_header());
        std::string col;
        while (std::getline(header, col, ',')) columns.push_back(col);
    }
    const size_t n_values = columns.size() - 1;  // step key excluded

    struct RunTable {
        std::string label;
        std::map<long, std::vector<std::string>> rows;
    };
    std::vector<RunTable> runs;
    for (const std::string& dir : dirs) {
        fs::path p = fs::path(dir).lexically_normal();
        std::string label = p.filename().string();
        if (label.empty()) label = p.parent_path().filename().string();
        for (const RunTable& existing : runs)
            if (existing.label == label) {
                label += "#" + std::to_string(runs.size());
                break;
            }
        std::ifstream in(fs::path(dir) / "metrics.csv");
        if (!in) throw std::runtime_error("cannot read metrics in " + dir);
        std::string line;
        if (!std::getline(in, line) || line != metrics_csv_header())
            throw std::runtime_error("foreign metrics header in " + dir);
        RunTable table;
        table.label = label;
        while (std::getline(in, line)) {
            if (line.empty()) continue;
            std::vector<std::string> cells;
            std::istringstream row(line);
            std::string cell;
            while (std::getline(row, cell, ',')) cells.push_back(cell);
            if (cells.size() != columns.size())
                throw std::runtime_error("malformed metrics row in " + dir + ": " + line);
            long step = 0;
            try {
                step = std::stol(cells[0]);
            } catch (const std::exception&) {
                throw std::runtime_error("malformed step in " + dir + ": " + line);
            }
            table.rows[step] = std::vector<std::string>(cells.begin() + 1, cells.end());
        }
        runs.push_back(std::move(table));
    }

    std::vector<long> steps;
    for (const RunTable& run : runs)
        for (const auto& [step, cells] : run.rows) steps.push_back(step);
    std::sort(steps.begin(), steps.end());
    steps.erase(std::unique(steps.begin(), steps.end()), steps.end());

    std::ofstream sink(out_path);
    if (!sink) throw std::runtime_error("cannot write " + out_path);
    sink << "step";
    for (const RunTable& run : runs)
        for (size_t c = 1; c < columns.size(); ++c) sink << ',' << run.label << '.' << columns[c];
    sink << '\n';
    for (long step : steps) {
        sink << step;
        for (const RunTable& run : runs) {
            auto it = run.rows.find(step);
            for (size_t c = 0; c < n_values; ++c) {
                sink << ',';
                if (it != run.rows.end()) sink << it->second[c];
            }
        }
        sink << '\n';
    }
    sink.flush();
    if (!sink) throw std::runtime_error("write failed: " + out_path);
    out << "wrote " << out_path << " (" << steps.size() << " steps, " << runs.size() << " runs)\n";
    return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
    CLI::App app{"Backdoor-attack training framework for cooperative grid teams"};
    app.require_subcommand(1);

    std::string config_path;
    bool single_threaded = false;
    CLI::App* train = app.add_subcommand("train", "Train the configured method for every seed");
    train->add_option("config", config_path, "Run configuration (JSON)")->required();
    train->add_flag("--single-threaded", single_threaded,
                    "No-op: this build always runs single-threaded");

    std::string run_dir, setting = "Benign", mode = "benign";
    int n_episodes = 128;
    uint64_t eval_seed = 9000;
    CLI::App* eval = app.add_subcommand("eval", "Evaluate checkpoints from a run directory");
    eval->add_option("dir", run_dir, "Run directory with config.json and checkpoints")->required();
    eval->add_option("--setting", setting, "Benign | Mixed_team | Backdoor")->required();
    eval->add_option("--mode", mode, "benign | abnormal")->required();
    eval->add_option("--n", n_episodes, "Evaluation episodes (default 128)");
    eval->add_option("--seed", eval_seed, "Evaluation seed");

    std::string corrupt_op;
    int trials = 3;
    CLI::App* grad = app.add_subcommand("gradcheck", "Finite-difference check of all architectures");
    grad->add_option("--corrupt", corrupt_op, "Test fixture: corrupt this op's backward rule");
    grad->add_option("--trials", trials, "Random trials per architecture");

    std::vector<std::string> agg_dirs;
    std::string agg_out;
    CLI::App* agg = app.add_subcommand("aggregate", "Merge run metrics into one wide CSV");
    agg->add_option("dirs", agg_dirs, "Run directories")->required()->expected(-1);
    agg->add_option("--out", agg_out, "Output CSV path")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        app.exit(e, out, err);
        return 2;
    }

    try {
        if (train->parsed()) return cmd_train(config_path, out);
        if (eval->parsed()) return cmd_eval(run_dir, setting, mode, n_episodes, eval_seed, out);
        if (grad->parsed()) return cmd_gradcheck(corrupt_op, trials, out);
        return cmd_aggregate(agg_dirs, agg_out, out);
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return 1;
    }
}

}  // namespace batmarl
