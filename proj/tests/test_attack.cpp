#include <cstring>
#include <random>
#include <stdexcept>
#include <vector>

#include "batmarl/attack.hpp"
#include "doctest.h"

using namespace batmarl;

namespace {

CoopGridConfig small_grid() {
    CoopGridConfig cfg;
    cfg.width = 5;
    cfg.height = 5;
    cfg.n_agents = 2;
    cfg.n_targets = 1;
    cfg.observation_radius = 1;
    cfg.episode_limit = 6;
    return cfg;
}

struct Rig {
    CoopGrid env;
    QmixLearner learner;
    RndModule rnd;
    TriggerModule trigger;

    explicit Rig(uint64_t seed, CoopGridConfig grid = small_grid())
        : env(grid),
          learner(env.spec(), learner_cfg(), seed),
          rnd(env.spec().observation_width, rnd_cfg(), seed + 1),
          trigger(env.spec().observation_width, env.spec().state_width, trigger_cfg(env.spec()), seed + 2) {}

    static QmixConfig learner_cfg() {
        QmixConfig cfg;
        cfg.hidden = 4;
        cfg.mixing_embed = 3;
        return cfg;
    }
    static RndConfig rnd_cfg() {
        RndConfig cfg;
        cfg.hidden = 6;
        cfg.out = 4;
        return cfg;
    }
    static TriggerConfig trigger_cfg(const DecPomdpSpec& spec) {
        TriggerConfig cfg;
        cfg.hidden = 4;
        cfg.value_hidden = 4;
        cfg.n_agents = spec.n_agents;
        return cfg;
    }
};

std::vector<std::vector<double>> snapshot(std::vector<Parameter*> ps) {
    std::vector<std::vector<double>> out;
    for (Parameter* p : ps) out.push_back(p->value.values);
    return out;
}

bool matches(std::vector<Parameter*> ps, const std::vector<std::vector<double>>& snap) {
    for (size_t i = 0; i < ps.size(); ++i) {
        const auto& a = ps[i]->value.values;
        const auto& b = snap[i];
        if (a.size() != b.size() || std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) != 0)
            return false;
    }
    return true;
}

Episode sample_with(Rig& rig, TriggerDriver& driver, int y, double epsilon, uint64_t env_seed,
                    std::mt19937_64& rng) {
    TeamPolicy team = team_policy(rig.learner);
    return sample_episode(rig.env, team, driver, y, epsilon, env_seed, rng);
}

}  // namespace

TEST_CASE("the external signal masks trigger decisions") {
    Rig rig(70);
    std::mt19937_64 rng(71);
    ForcedTriggerDriver always(1), never(0);

    Episode blocked = sample_with(rig, always, 0, 0.3, 5, rng);
    CHECK(blocked.length() > 0);
    for (const auto& s : blocked.steps) {
        CHECK(s.d == 1);
        CHECK(s.eff == 0);
    }
    CHECK_FALSE(blocked.abnormal());
    CHECK(blocked.y == 0);

    Episode triggered = sample_with(rig, always, 1, 0.3, 5, rng);
    for (const auto& s : triggered.steps) CHECK(s.eff == 1);
    CHECK(triggered.abnormal());

    Episode idle = sample_with(rig, never, 1, 0.3, 5, rng);
    for (const auto& s : idle.steps) CHECK(s.eff == 0);
    CHECK_FALSE(idle.abnormal());
}

TEST_CASE("sampling is reproducible from the seeds") {
    Rig rig(72);
    ForcedTriggerDriver never(0);
    PolicyTriggerDriver policy(rig.trigger);

    for (TriggerDriver* driver : {static_cast<TriggerDriver*>(&never), static_cast<TriggerDriver*>(&policy)}) {
        std::mt19937_64 rng_a(73), rng_b(73);
        Episode a = sample_with(rig, *driver, 1, 0.4, 9, rng_a);
        Episode b = sample_with(rig, *driver, 1, 0.4, 9, rng_b);
        REQUIRE(a.length() == b.length());
        for (int t = 0; t < a.length(); ++t) {
            CHECK(a.steps[static_cast<size_t>(t)].actions == b.steps[static_cast<size_t>(t)].actions);
            CHECK(a.steps[static_cast<size_t>(t)].d == b.steps[static_cast<size_t>(t)].d);
            CHECK(a.steps[static_cast<size_t>(t)].reward == b.steps[static_cast<size_t>(t)].reward);
        }
        CHECK(a.final_state == b.final_state);
    }
}

TEST_CASE("the sampler validates its inputs") {
    Rig rig(74);
    ForcedTriggerDriver never(0);
    std::mt19937_64 rng(75);
    TeamPolicy team = team_policy(rig.learner);

    CHECK_THROWS_AS(sample_episode(rig.env, team, never, 2, 0.0, 1, rng), std::invalid_argument);
    TeamPolicy missing = team;
    missing.adversary = nullptr;
    CHECK_THROWS_AS(sample_episode(rig.env, missing, never, 0, 0.0, 1, rng), std::invalid_argument);
    TeamPolicy short_team = team;
    short_team.teammates.pop_back();
    CHECK_THROWS_AS(sample_episode(rig.env, short_team, never, 0, 0.0, 1, rng), std::invalid_argument);
    CHECK_THROWS_AS(ForcedTriggerDriver(2), std::invalid_argument);
}

TEST_CASE("episodes route on the effective trigger sum") {
    Rig rig(76);
    std::mt19937_64 rng(77);
    ForcedTriggerDriver always(1), never(0);
    DualReplayBuffer buffers(8);

    // Permission without a trigger is benign, as is a blocked trigger.
    CHECK(buffers.route(sample_with(rig, never, 1, 0.2, 1, rng)) == Route::benign);
    CHECK(buffers.route(sample_with(rig, always, 0, 0.2, 2, rng)) == Route::benign);
    CHECK(buffers.benign().size() == 2);
    CHECK(buffers.abnormal().size() == 0);

    // A single effective trigger routes the whole episode abnormal.
    Episode one = sample_with(rig, never, 1, 0.2, 3, rng);
    REQUIRE(one.length() >= 2);
    one.steps[1].d = 1;
    one.steps[1].eff = 1;
    CHECK(buffers.route(std::move(one)) == Route::abnormal);
    CHECK(buffers.route(sample_with(rig, always, 1, 0.2, 4, rng)) == Route::abnormal);
    CHECK(buffers.benign().size() == 2);
    CHECK(buffers.abnormal().size() == 2);
}

TEST_CASE("reward flipping negates the suffix after the first trigger") {
    Episode ep;
    ep.y = 1;
    for (double r : {1.0, 2.0, 3.0, 4.0}) {
        EpisodeStep s;
        s.reward = r;
        ep.steps.push_back(std::move(s));
    }

    SUBCASE("interior trigger") {
        ep.steps[1].d = 1;
        ep.steps[1].eff = 1;
        flip_rewards(ep);
        CHECK(ep.steps[0].reward == 1.0);
        CHECK(ep.steps[1].reward == 2.0);
        CHECK(ep.steps[2].reward == -3.0);
        CHECK(ep.steps[3].reward == -4.0);
        // Later triggers do not restart the flip.
        ep.steps[3].d = 1;
        ep.steps[3].eff = 1;
        flip_rewards(ep);
        CHECK(ep.steps[2].reward == 3.0);
        CHECK(ep.steps[3].reward == 4.0);
    }

    SUBCASE("trigger at the final step leaves every reward alone") {
        ep.steps[3].eff = 1;
        flip_rewards(ep);
        for (size_t t = 0; t < 4; ++t) CHECK(ep.steps[t].reward == static_cast<double>(t + 1));
    }

    SUBCASE("all-zero rewards are unchanged") {
        for (auto& s : ep.steps) s.reward = 0.0;
        ep.steps[0].eff = 1;
        flip_rewards(ep);
        for (const auto& s : ep.steps) CHECK(s.reward == 0.0);
    }

    SUBCASE("flipping twice restores the original exactly") {
        std::mt19937_64 rng(78);
        std::uniform_real_distribution<double> unit(-3.0, 3.0);
        for (auto& s : ep.steps) s.reward = unit(rng);
        std::vector<double> original;
        for (const auto& s : ep.steps) original.push_back(s.reward);
        ep.steps[2].eff = 1;
        flip_rewards(ep);
        flip_rewards(ep);
        for (size_t t = 0; t < 4; ++t)
            CHECK(std::memcmp(&ep.steps[t].reward, &original[t], sizeof(double)) == 0);
    }

    SUBCASE("a benign episode is rejected") {
        CHECK_THROWS_WITH_AS(flip_rewards(ep), doctest::Contains("contract violation"),
                             std::runtime_error);
    }
}

TEST_CASE("training phases respect the buffer guards and parameter scopes") {
    Rig rig(79);
    std::mt19937_64 rng(80);
    ForcedTriggerDriver always(1), never(0);
    AttackConfig cfg;
    cfg.batch_size = 4;
    cfg.buffer_capacity = 16;
    DualReplayBuffer buffers(cfg.buffer_capacity);
    std::vector<Episode> fresh;

    SUBCASE("below the batch threshold nothing trains") {
        for (int i = 0; i < 3; ++i) buffers.route(sample_with(rig, never, 0, 0.5, 100 + i, rng));
        auto qmix_before = snapshot(rig.learner.parameters());
        auto rnd_before = snapshot(rig.rnd.parameters());
        auto trig_before = snapshot(rig.trigger.parameters());
        TrainReport report = training_step(buffers, rig.learner, rig.rnd, rig.trigger, fresh, cfg, rng);
        CHECK_FALSE(report.benign_trained);
        CHECK_FALSE(report.abnormal_trained);
        CHECK_FALSE(report.trigger_trained);
        CHECK(matches(rig.learner.parameters(), qmix_before));
        CHECK(matches(rig.rnd.parameters(), rnd_before));
        CHECK(matches(rig.trigger.parameters(), trig_before));
    }

    SUBCASE("the benign phase never touches the trigger components") {
        for (int i = 0; i < 5; ++i) buffers.route(sample_with(rig, never, 0, 0.5, 100 + i, rng));
        auto trig_before = snapshot(rig.trigger.parameters());
        auto qmix_before = snapshot(rig.learner.parameters());
        TrainReport report = training_step(buffers, rig.learner, rig.rnd, rig.trigger, fresh, cfg, rng);
        CHECK(report.benign_trained);
        CHECK_FALSE(report.abnormal_trained);
        CHECK(report.rnd_loss > 0.0);
        CHECK(matches(rig.trigger.parameters(), trig_before));
        CHECK_FALSE(matches(rig.learner.parameters(), qmix_before));
    }

    SUBCASE("the abnormal phase never trains the novelty predictor") {
        std::vector<Episode> generated;
        for (int i = 0; i < 5; ++i) {
            Episode ep = sample_with(rig, always, 1, 0.5, 200 + i, rng);
            ep.serial = static_cast<uint64_t>(i);
            generated.push_back(ep);
            buffers.route(std::move(ep));
        }
        fresh.assign(generated.begin(), generated.end());
        auto rnd_before = snapshot(rig.rnd.parameters());
        auto trig_before = snapshot(rig.trigger.parameters());
        TrainReport report = training_step(buffers, rig.learner, rig.rnd, rig.trigger, fresh, cfg, rng);
        CHECK_FALSE(report.benign_trained);
        CHECK(report.abnormal_trained);
        CHECK(report.trigger_trained);
        CHECK(fresh.empty());
        CHECK(matches(rig.rnd.parameters(), rnd_before));
        CHECK_FALSE(matches(rig.trigger.parameters(), trig_before));

        // The stored episodes keep their original rewards: flips happen on
        // training copies only.
        bool any_negated = false;
        for (size_t i = 0; i < buffers.abnormal().size(); ++i) {
            const Episode& stored = buffers.abnormal().at(i);
            const Episode& source = generated[i];
            for (int t = 0; t < stored.length(); ++t)
                if (stored.steps[static_cast<size_t>(t)].reward !=
                    source.steps[static_cast<size_t>(t)].reward)
                    any_negated = true;
        }
        CHECK_FALSE(any_negated);
    }
}

TEST_CASE("scripted trigger drivers produce their schedules") {
    std::mt19937_64 rng(81);
    std::vector<double> obs = {0.0};

    SUBCASE("single random step") {
        RandomStepTriggerDriver driver;
        std::vector<int> hits(10, 0);
        for (int trial = 0; trial < 2000; ++trial) {
            driver.begin_episode(10, rng);
            int count = 0, at = -1;
            for (int t = 0; t < 10; ++t)
                if (driver.decide(obs, rng) == 1) {
                    ++count;
                    at = t;
                }
            REQUIRE(count == 1);
            ++hits[static_cast<size_t>(at)];
        }
        for (int h : hits) CHECK(h > 0);
    }

    SUBCASE("fixed-length window") {
        SequenceTriggerDriver driver(3);
        for (int trial = 0; trial < 500; ++trial) {
            driver.begin_episode(8, rng);
            std::vector<int> d;
            for (int t = 0; t < 8; ++t) d.push_back(driver.decide(obs, rng));
            int first = -1, count = 0;
            for (int t = 0; t < 8; ++t)
                if (d[static_cast<size_t>(t)] == 1) {
                    if (first < 0) first = t;
                    ++count;
                }
            REQUIRE(count == 3);
            CHECK(first == driver.start());
            CHECK(first + 3 <= 8);
            for (int t = first; t < first + 3; ++t) CHECK(d[static_cast<size_t>(t)] == 1);
        }
        // A window longer than the episode still fits by starting at 0.
        SequenceTriggerDriver wide(20);
        wide.begin_episode(4, rng);
        for (int t = 0; t < 4; ++t) CHECK(wide.decide(obs, rng) == 1);
        CHECK_THROWS_AS(SequenceTriggerDriver(0), std::invalid_argument);
    }
}

TEST_CASE("the full loop keeps its accounting and discipline") {
    AttackConfig cfg;
    cfg.step_limit = 3000;
    cfg.benign_period = 1200;
    cfg.batch_size = 8;
    cfg.buffer_capacity = 64;
    cfg.target_refresh_episodes = 20;
    cfg.eval_interval = 500;
    cfg.epsilon.anneal_steps = 1000;

    auto run_once = [&](std::vector<MetricsRow>& rows, std::vector<std::string>& tags) {
        Rig rig(82);
        RunHooks hooks;
        long length_sum = 0;
        uint64_t episode_count = 0;
        long benign_step_budget = -1;
        hooks.on_episode = [&](const Episode& ep) {
            CHECK(ep.serial == episode_count);
            ++episode_count;
            // Signal discipline: no permission, hence no effective trigger,
            // for any episode begun during the benign period.
            if (length_sum < cfg.benign_period) {
                CHECK(ep.y == 0);
                CHECK_FALSE(ep.abnormal());
            }
            length_sum += ep.length();
        };
        hooks.evaluate = [&](long step) {
            EvalSnapshot snap;
            snap.benign_win_rate = static_cast<double>(step);
            return snap;
        };
        hooks.on_metrics = [&](const MetricsRow& row) { rows.push_back(row); };
        hooks.save_checkpoint = [&](const std::string& tag) {
            tags.push_back(tag);
            if (tag == "benign") benign_step_budget = length_sum;
        };
        RunResult result = run_attack(rig.env, rig.learner, rig.rnd, rig.trigger, cfg, hooks, 83);
        CHECK(result.t_total == length_sum);
        CHECK(result.episodes == episode_count);
        CHECK(result.t_total >= cfg.step_limit);
        CHECK(benign_step_budget >= cfg.benign_period);
        return result;
    };

    std::vector<MetricsRow> rows_a, rows_b;
    std::vector<std::string> tags_a, tags_b;
    RunResult a = run_once(rows_a, tags_a);
    RunResult b = run_once(rows_b, tags_b);

    CHECK(rows_a.size() == 6);
    for (size_t i = 0; i < rows_a.size(); ++i)
        CHECK(rows_a[i].step == static_cast<long>(i + 1) * cfg.eval_interval);
    CHECK(tags_a == std::vector<std::string>{"benign", "final"});

    // Identical seeds give identical streams.
    CHECK(a.t_total == b.t_total);
    CHECK(a.episodes == b.episodes);
    CHECK(tags_a == tags_b);
    REQUIRE(rows_a.size() == rows_b.size());
    for (size_t i = 0; i < rows_a.size(); ++i) {
        CHECK(rows_a[i].qmix_loss == rows_b[i].qmix_loss);
        CHECK(rows_a[i].rnd_loss == rows_b[i].rnd_loss);
        CHECK(rows_a[i].trigger_loss == rows_b[i].trigger_loss);
        CHECK(rows_a[i].value_loss == rows_b[i].value_loss);
    }
    // Training happened in both phases somewhere along the run.
    bool any_qmix = false, any_trigger = false;
    for (const auto& row : rows_a) {
        if (row.qmix_loss != 0.0) any_qmix = true;
        if (row.trigger_loss != 0.0) any_trigger = true;
    }
    CHECK(any_qmix);
    CHECK(any_trigger);
}

TEST_CASE("a checkpoint failure saves a resumable state and propagates") {
    AttackConfig cfg;
    cfg.step_limit = 1500;
    cfg.benign_period = 600;
    cfg.batch_size = 8;
    cfg.buffer_capacity = 64;
    cfg.eval_interval = 500;

    Rig rig(84);
    RunHooks hooks;
    std::vector<RunState> states;
    hooks.save_checkpoint = [](const std::string&) { throw std::runtime_error("disk full"); };
    hooks.save_resume_state = [&](const RunState& s) { states.push_back(s); };
    CHECK_THROWS_WITH_AS(run_attack(rig.env, rig.learner, rig.rnd, rig.trigger, cfg, hooks, 85),
                         "disk full", std::runtime_error);
    REQUIRE(states.size() == 1);
    CHECK(states[0].t_total >= cfg.benign_period);
    CHECK(states[0].episodes > 0);
    CHECK_FALSE(states[0].rng_state.empty());
}

TEST_CASE("the attack configuration rejects inconsistent limits") {
    AttackConfig cfg;
    CHECK_NOTHROW(cfg.validate());
    AttackConfig bad = cfg;
    bad.benign_period = bad.step_limit;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.abnormal_probability = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.buffer_capacity = 8;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.eval_interval = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}
