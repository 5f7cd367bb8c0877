#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "batmarl/baselines.hpp"
#include "batmarl/evalmetrics.hpp"
#include "doctest.h"

using namespace batmarl;

namespace {

CoopGridConfig small_grid() {
    CoopGridConfig g;
    g.width = 5;
    g.height = 5;
    g.n_agents = 2;
    g.n_targets = 1;
    g.observation_radius = 1;
    g.episode_limit = 6;
    return g;
}

QmixConfig small_qmix() {
    QmixConfig cfg;
    cfg.hidden = 4;
    cfg.mixing_embed = 3;
    cfg.adversary_index = 0;
    return cfg;
}

Parameter* suffixed(std::vector<Parameter*> ps, const std::string& suffix) {
    for (Parameter* p : ps)
        if (p->name.size() >= suffix.size() &&
            p->name.compare(p->name.size() - suffix.size(), suffix.size(), suffix) == 0)
            return p;
    REQUIRE(false);
    return nullptr;
}

// Clearing every weight makes each agent's Q row equal its output bias, so
// the greedy action is pinned per network.
void rig_constant_team(QmixLearner& learner, int teammate_action, int adversary_action) {
    for (Parameter* p : learner.all_parameters()) p->value.fill(0.0);
    const DecPomdpSpec& spec = learner.env_spec();
    auto bias = [&](int action) {
        std::vector<double> b(static_cast<size_t>(spec.action_counts[0]), 0.0);
        b[static_cast<size_t>(action)] = 20.0;
        return Tensor({spec.action_counts[0]}, b);
    };
    for (int a = 0; a < spec.n_agents; ++a) {
        if (a == learner.adversary_index()) continue;
        suffixed(learner.teammate(a).parameters(), ".out.b")->value = bias(teammate_action);
    }
    suffixed(learner.adversary().parameters(), ".out.b")->value = bias(adversary_action);
}

// Loss columns accumulate thousands of terms whose summation order can shift
// by machine epsilon between runs, so repeat-run comparisons allow a tight
// relative tolerance.
bool rows_close(const MetricsRow& a, const MetricsRow& b) {
    auto near = [](double x, double y) { return x == doctest::Approx(y).epsilon(1e-9); };
    return a.step == b.step && near(a.benign_win_rate, b.benign_win_rate) &&
           near(a.abnormal_fail_rate, b.abnormal_fail_rate) &&
           near(a.mean_trigger_count, b.mean_trigger_count) && near(a.qmix_loss, b.qmix_loss) &&
           near(a.rnd_loss, b.rnd_loss) && near(a.trigger_loss, b.trigger_loss) &&
           near(a.value_loss, b.value_loss) && near(a.diff_obs, b.diff_obs);
}

// Trajectories are integer-valued where it matters, so repeat runs must match
// them exactly.
void check_same_trajectories(const std::vector<Episode>& a, const std::vector<Episode>& b) {
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].serial == b[i].serial);
        CHECK(a[i].y == b[i].y);
        REQUIRE(a[i].length() == b[i].length());
        for (int t = 0; t < a[i].length(); ++t)
            CHECK(a[i].steps[static_cast<size_t>(t)].actions ==
                  b[i].steps[static_cast<size_t>(t)].actions);
    }
}

// A one-step episode with fixed observations for the clone-corpus tests.
CloneEpisode fixed_obs_episode(int adversary_action, int teammate_action, bool latched) {
    CloneEpisode ce;
    EpisodeStep s;
    s.state = {0.1, 0.2};
    s.obs = {{0.3, 0.7, 0.1}, {0.2, 0.5, 0.9}};
    s.actions = {adversary_action, teammate_action};
    s.reward = 0.0;
    if (latched) {
        s.d = 1;
        s.eff = 1;
    }
    ce.episode.steps.push_back(std::move(s));
    ce.episode.y = latched ? 1 : 0;
    if (latched) {
        ce.trigger_start = 0;
        ce.trigger_length = 1;
    }
    return ce;
}

DecPomdpSpec tiny_spec() {
    DecPomdpSpec spec;
    spec.n_agents = 2;
    spec.action_counts = {5, 5};
    spec.observation_width = 3;
    spec.state_width = 2;
    spec.episode_limit = 4;
    return spec;
}

}  // namespace

TEST_CASE("decision rule matches the pinned arithmetic") {
    // threshold 0.5 - (P_t - P_c) = 1.1: no draw can exceed it.
    CHECK_FALSE(intent_abnormal(0.2, 0.8, 0.6));
    // threshold -0.3: every draw exceeds it.
    CHECK(intent_abnormal(0.9, 0.1, 0.3));
    CHECK(intent_abnormal(0.5, 0.5, 0.500001));
    CHECK_FALSE(intent_abnormal(0.5, 0.5, 0.499999));

    // The threshold 0.5 - (P_t - P_c) falls as the attack rate rises and
    // climbs as the task rate rises, so abnormal decisions are monotone in
    // both rates.
    for (double draw = 0.05; draw < 1.0; draw += 0.1)
        for (double low = 0.0; low <= 0.8; low += 0.2) {
            if (intent_abnormal(low, 0.4, draw)) CHECK(intent_abnormal(low + 0.2, 0.4, draw));
            if (intent_abnormal(0.4, low + 0.2, draw)) CHECK(intent_abnormal(0.4, low, draw));
        }
}

TEST_CASE("decision frequency tracks the analytic probability") {
    std::mt19937_64 rng(110);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    auto frequency = [&](double p_t, double p_c) {
        int abnormal = 0;
        for (int i = 0; i < 10000; ++i) abnormal += intent_abnormal(p_t, p_c, u(rng)) ? 1 : 0;
        return abnormal / 10000.0;
    };

    CHECK(frequency(0.5, 0.5) == doctest::Approx(0.5).epsilon(0.04));
    CHECK(frequency(0.5, 0.2) == doctest::Approx(0.8).epsilon(0.03));
    CHECK(frequency(0.3, 0.7) == doctest::Approx(0.1).epsilon(0.2));
    CHECK(frequency(0.2, 0.8) == 0.0);
    CHECK(frequency(0.9, 0.1) == 1.0);
    CHECK(frequency(0.4, 0.8) < frequency(0.4, 0.2));

    // Through the windowed state: attack 1/2, task 1/4 -> threshold 0.25.
    IntentState state(8);
    state.record_attack(true);
    state.record_attack(false);
    state.record_task(true);
    state.record_task(false);
    state.record_task(false);
    state.record_task(false);
    int abnormal = 0;
    for (int i = 0; i < 10000; ++i) abnormal += intent_episode_mode(state, rng) ? 1 : 0;
    CHECK(abnormal / 10000.0 == doctest::Approx(0.75).epsilon(0.03));
}

TEST_CASE("success rates are windowed means") {
    CHECK_THROWS_AS(IntentState(0), std::invalid_argument);

    IntentState state(4);
    CHECK(state.window() == 4);
    CHECK(state.attack_rate() == 0.0);
    CHECK(state.task_rate() == 0.0);

    for (int i = 0; i < 5; ++i) state.record_attack(true);
    for (int i = 0; i < 3; ++i) state.record_attack(false);
    // Window holds the last four outcomes: one success, three failures.
    CHECK(state.attack_rate() == doctest::Approx(0.25));
    CHECK(state.task_rate() == 0.0);

    state.record_task(true);
    CHECK(state.task_rate() == 1.0);
    CHECK(state.attack_rate() == doctest::Approx(0.25));
}

TEST_CASE("mode decision consumes exactly one uniform draw") {
    IntentState state(32);  // empty -> rates 0, threshold 0.5
    std::mt19937_64 a(111), b(111);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < 200; ++i) CHECK(intent_episode_mode(state, a) == (u(b) > 0.5));
}

TEST_CASE("single random trigger step is uniform over the episode") {
    std::mt19937_64 rng(112);
    RandomStepTriggerDriver driver;
    std::vector<double> obs;
    std::vector<int> counts(10, 0);
    for (int trial = 0; trial < 10000; ++trial) {
        driver.begin_episode(10, rng);
        for (int t = 0; t < 10; ++t)
            if (driver.decide(obs, rng) == 1) ++counts[static_cast<size_t>(t)];
    }
    double chi2 = 0.0;
    for (int c : counts) {
        CHECK(c > 0);
        double d = c - 1000.0;
        chi2 += d * d / 1000.0;
    }
    // 9 degrees of freedom; 21.666 is the p=0.01 cutoff.
    CHECK(chi2 < 21.666);
}

TEST_CASE("abnormal sampling negates rewards after the trigger") {
    CoopGrid env(small_grid());
    QmixLearner learner(env.spec(), small_qmix(), 113);
    TeamPolicy team = team_policy(learner);

    SUBCASE("matches the shared flip applied by hand") {
        std::mt19937_64 rng_a(114), rng_b(114);
        RandomStepTriggerDriver driver;
        Episode raw = sample_episode(env, team, driver, 1, 0.3, 777, rng_a);
        Episode applied = intent_apply(env, team, 0.3, 777, rng_b);

        Episode manual = raw;
        if (manual.abnormal()) flip_rewards(manual);
        REQUIRE(applied.length() == manual.length());
        for (int t = 0; t < manual.length(); ++t) {
            const EpisodeStep& m = manual.steps[static_cast<size_t>(t)];
            const EpisodeStep& g = applied.steps[static_cast<size_t>(t)];
            CHECK(g.d == m.d);
            CHECK(g.eff == m.eff);
            CHECK(g.actions == m.actions);
            CHECK(g.reward == m.reward);
        }
        CHECK(applied.y == 1);
    }

    SUBCASE("a final-step trigger leaves every reward in place") {
        CoopGridConfig g = small_grid();
        g.episode_limit = 1;
        CoopGrid one(g);
        std::mt19937_64 rng(115);
        Episode ep = intent_apply(one, team, 0.0, 778, rng);
        REQUIRE(ep.length() == 1);
        CHECK(ep.steps[0].d == 1);
        CHECK(ep.steps[0].eff == 1);
        CHECK(ep.abnormal());
    }
}

TEST_CASE("benign training loop accounts steps and emits loss rows") {
    CoopGridConfig g = small_grid();
    AttackConfig cfg;
    cfg.step_limit = 600;
    cfg.benign_period = 0;
    cfg.batch_size = 8;
    cfg.buffer_capacity = 64;
    cfg.target_refresh_episodes = 20;
    cfg.eval_interval = 200;
    cfg.epsilon.anneal_steps = 300;

    struct Capture {
        std::vector<Episode> episodes;
        std::vector<MetricsRow> rows;
        std::vector<std::string> tags;
    };
    auto run_once = [&](uint64_t learner_seed, uint64_t run_seed, bool with_rnd, bool negate,
                        Capture& cap) {
        CoopGrid env(g);
        QmixLearner learner(env.spec(), small_qmix(), learner_seed);
        RndConfig rc;
        rc.hidden = 8;
        rc.out = 4;
        RndModule rnd(env.spec().observation_width, rc, learner_seed + 1);
        RunHooks hooks;
        hooks.on_episode = [&](const Episode& ep) { cap.episodes.push_back(ep); };
        hooks.on_metrics = [&](const MetricsRow& row) { cap.rows.push_back(row); };
        hooks.save_checkpoint = [&](const std::string& tag) { cap.tags.push_back(tag); };
        return run_benign_qmix(env, learner, with_rnd ? &rnd : nullptr, cfg, hooks, run_seed, negate);
    };

    Capture plain;
    RunResult result = run_once(116, 117, true, false, plain);

    long length_sum = 0;
    for (size_t i = 0; i < plain.episodes.size(); ++i) {
        const Episode& ep = plain.episodes[i];
        CHECK(ep.serial == i);
        CHECK(ep.y == 0);
        CHECK(ep.trigger_count() == 0);
        length_sum += ep.length();
    }
    CHECK(result.t_total == length_sum);
    CHECK(result.t_total >= cfg.step_limit);
    CHECK(result.episodes == plain.episodes.size());
    REQUIRE(plain.rows.size() == 3);
    for (size_t i = 0; i < plain.rows.size(); ++i) {
        CHECK(plain.rows[i].step == 200 * static_cast<long>(i + 1));
        CHECK(plain.rows[i].qmix_loss > 0.0);
        CHECK(plain.rows[i].rnd_loss > 0.0);
        CHECK(plain.rows[i].trigger_loss == 0.0);
        CHECK(plain.rows[i].value_loss == 0.0);
    }
    CHECK(plain.tags == std::vector<std::string>{"final"});

    SUBCASE("identical seeds reproduce the run") {
        Capture again;
        run_once(116, 117, true, false, again);
        REQUIRE(again.rows.size() == plain.rows.size());
        for (size_t i = 0; i < plain.rows.size(); ++i) CHECK(rows_close(plain.rows[i], again.rows[i]));
        check_same_trajectories(plain.episodes, again.episodes);
    }

    SUBCASE("negation flips recorded rewards and nothing else before training kicks in") {
        Capture negated;
        run_once(116, 117, false, true, negated);
        CHECK(negated.rows[0].rnd_loss == 0.0);
        // Until the first update (buffer reaches the batch size) both runs
        // act identically, so rewards must be exact mirrors.
        size_t horizon = std::min<size_t>(8, std::min(plain.episodes.size(), negated.episodes.size()));
        for (size_t i = 0; i < horizon; ++i) {
            const Episode& p = plain.episodes[i];
            const Episode& n = negated.episodes[i];
            REQUIRE(p.length() == n.length());
            for (int t = 0; t < p.length(); ++t) {
                CHECK(p.steps[static_cast<size_t>(t)].actions == n.steps[static_cast<size_t>(t)].actions);
                CHECK(n.steps[static_cast<size_t>(t)].reward ==
                      -p.steps[static_cast<size_t>(t)].reward);
            }
        }
    }
}

TEST_CASE("adaptive attack loop holds the benign period and single triggers") {
    CoopGridConfig g = small_grid();
    AttackConfig cfg;
    cfg.step_limit = 3000;
    cfg.benign_period = 1200;
    cfg.batch_size = 8;
    cfg.buffer_capacity = 64;
    cfg.target_refresh_episodes = 20;
    cfg.eval_interval = 500;
    cfg.epsilon.anneal_steps = 1000;
    IntentConfig icfg;

    struct Capture {
        std::vector<Episode> episodes;
        std::vector<MetricsRow> rows;
        std::vector<std::string> tags;
    };
    auto run_once = [&](Capture& cap) {
        CoopGrid env(g);
        QmixLearner learner(env.spec(), small_qmix(), 118);
        RndConfig rc;
        rc.hidden = 8;
        rc.out = 4;
        RndModule rnd(env.spec().observation_width, rc, 119);
        RunHooks hooks;
        hooks.on_episode = [&](const Episode& ep) { cap.episodes.push_back(ep); };
        hooks.on_metrics = [&](const MetricsRow& row) { cap.rows.push_back(row); };
        hooks.save_checkpoint = [&](const std::string& tag) { cap.tags.push_back(tag); };
        return run_intent(env, learner, rnd, cfg, icfg, hooks, 120);
    };

    Capture cap;
    RunResult result = run_once(cap);

    long length_sum = 0;
    int abnormal_count = 0;
    for (size_t i = 0; i < cap.episodes.size(); ++i) {
        const Episode& ep = cap.episodes[i];
        CHECK(ep.serial == i);
        if (length_sum < cfg.benign_period) {
            CHECK(ep.y == 0);
            CHECK_FALSE(ep.abnormal());
        }
        if (ep.abnormal()) {
            ++abnormal_count;
            CHECK(ep.y == 1);
            // The trigger fires at exactly one step.
            CHECK(ep.trigger_count() == 1);
        }
        length_sum += ep.length();
    }
    CHECK(result.t_total == length_sum);
    CHECK(result.episodes == cap.episodes.size());
    CHECK(abnormal_count > 0);

    REQUIRE(cap.rows.size() == 6);
    for (size_t i = 0; i < cap.rows.size(); ++i) {
        CHECK(cap.rows[i].step == 500 * static_cast<long>(i + 1));
        CHECK(cap.rows[i].qmix_loss > 0.0);
        CHECK(cap.rows[i].rnd_loss > 0.0);
        CHECK(cap.rows[i].trigger_loss == 0.0);
        CHECK(cap.rows[i].value_loss == 0.0);
    }
    CHECK(cap.tags == std::vector<std::string>{"benign", "final"});

    Capture again;
    run_once(again);
    REQUIRE(again.rows.size() == cap.rows.size());
    for (size_t i = 0; i < cap.rows.size(); ++i) CHECK(rows_close(cap.rows[i], again.rows[i]));
    check_same_trajectories(cap.episodes, again.episodes);
}

TEST_CASE("cloning config and the latched driver validate their inputs") {
    BackdoorlConfig cfg;
    cfg.validate();

    BackdoorlConfig bad = cfg;
    bad.p_tri = 1.5;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.n_tri = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.clone_epochs = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.pretrain_steps = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.collect_episodes = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.eval_episodes = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);

    CHECK_THROWS_AS(LatchedTriggerDriver(0), std::invalid_argument);
    std::mt19937_64 rng(121);
    std::vector<double> obs;
    LatchedTriggerDriver latched(3);
    for (int trial = 0; trial < 200; ++trial) {
        latched.begin_episode(8, rng);
        CHECK(latched.start() >= 0);
        CHECK(latched.start() <= 5);
        int first_on = -1;
        for (int t = 0; t < 8; ++t) {
            int d = latched.decide(obs, rng);
            if (d == 1 && first_on < 0) first_on = t;
            // Once on, the input stays on.
            if (first_on >= 0) CHECK(d == 1);
        }
        CHECK(first_on == latched.start());
    }
    LatchedTriggerDriver wide(20);
    wide.begin_episode(4, rng);
    CHECK(wide.start() == 0);
}

TEST_CASE("stitched collection labels the three phases") {
    SUBCASE("the pinned boundary example") {
        CloneEpisode ce;
        for (int t = 0; t < 20; ++t) ce.episode.steps.push_back(EpisodeStep{});
        ce.trigger_start = 3;
        ce.trigger_length = 5;
        for (int t = 0; t <= 2; ++t) CHECK(clone_phase(ce, t) == ClonePhase::benign);
        for (int t = 3; t <= 7; ++t) CHECK(clone_phase(ce, t) == ClonePhase::trigger);
        for (int t = 8; t <= 19; ++t) CHECK(clone_phase(ce, t) == ClonePhase::malicious);
        for (int t = 0; t <= 2; ++t) CHECK(latched_bit(ce, t) == 0);
        for (int t = 3; t <= 19; ++t) CHECK(latched_bit(ce, t) == 1);
        CHECK_THROWS_AS(clone_phase(ce, 20), std::out_of_range);
        CHECK_THROWS_AS(clone_phase(ce, -1), std::out_of_range);
    }

    CoopGridConfig g;
    g.width = 8;
    g.height = 8;
    g.n_agents = 2;
    g.n_targets = 2;
    g.observation_radius = 2;
    g.episode_limit = 12;
    CoopGrid env(g);
    QmixLearner stay(env.spec(), small_qmix(), 122);
    QmixLearner east(env.spec(), small_qmix(), 123);
    rig_constant_team(stay, 0, 0);
    rig_constant_team(east, 4, 4);
    BackdoorlConfig cfg;
    cfg.n_tri = 4;

    SUBCASE("phase-accurate actions, window flags and the latched input") {
        cfg.p_tri = 0.5;
        CloneDataset ds = backdoorl_collect(env, team_policy(stay), team_policy(east), cfg, 60, 124);
        REQUIRE(ds.episodes.size() == 60);
        CHECK(ds.n_agents == 2);
        CHECK(ds.adversary_index == 0);
        int benign_count = 0, abnormal_count = 0;
        for (const CloneEpisode& ce : ds.episodes) {
            int len = ce.episode.length();
            REQUIRE(len >= 1);
            if (ce.trigger_start < 0) {
                ++benign_count;
                CHECK(ce.episode.y == 0);
                CHECK(ce.trigger_length == 0);
                for (int t = 0; t < len; ++t) {
                    const EpisodeStep& s = ce.episode.steps[static_cast<size_t>(t)];
                    CHECK(s.d == 0);
                    CHECK(s.eff == 0);
                    CHECK(s.actions == std::vector<int>{0, 0});
                    CHECK(clone_phase(ce, t) == ClonePhase::benign);
                    CHECK(latched_bit(ce, t) == 0);
                }
            } else {
                ++abnormal_count;
                CHECK(ce.episode.y == 1);
                int start = ce.trigger_start;
                CHECK(start >= 0);
                CHECK(start <= g.episode_limit - cfg.n_tri);
                if (start < len)
                    CHECK(ce.trigger_length == std::min(cfg.n_tri, len - start));
                for (int t = 0; t < len; ++t) {
                    const EpisodeStep& s = ce.episode.steps[static_cast<size_t>(t)];
                    bool in_window = t >= start && t < start + cfg.n_tri;
                    CHECK(s.d == (in_window ? 1 : 0));
                    CHECK(s.eff == (in_window ? 1 : 0));
                    CHECK(latched_bit(ce, t) == (t >= start ? 1 : 0));
                    // Adversary deviates from the window start; teammates
                    // only after the window.
                    CHECK(s.actions[0] == (t >= start ? 4 : 0));
                    CHECK(s.actions[1] == (t >= start + cfg.n_tri ? 4 : 0));
                    if (t < start)
                        CHECK(clone_phase(ce, t) == ClonePhase::benign);
                    else if (in_window)
                        CHECK(clone_phase(ce, t) == ClonePhase::trigger);
                    else
                        CHECK(clone_phase(ce, t) == ClonePhase::malicious);
                }
            }
        }
        CHECK(benign_count > 0);
        CHECK(abnormal_count > 0);
    }

    SUBCASE("probability zero keeps the corpus benign") {
        cfg.p_tri = 0.0;
        CloneDataset ds = backdoorl_collect(env, team_policy(stay), team_policy(east), cfg, 20, 125);
        for (const CloneEpisode& ce : ds.episodes) {
            CHECK(ce.trigger_start == -1);
            CHECK(ce.episode.trigger_count() == 0);
        }
    }

    SUBCASE("collections differing only in window length replay the same layouts") {
        cfg.p_tri = 1.0;
        BackdoorlConfig longer = cfg;
        longer.n_tri = 8;
        CloneDataset d4 = backdoorl_collect(env, team_policy(stay), team_policy(east), cfg, 30, 126);
        CloneDataset d8 = backdoorl_collect(env, team_policy(stay), team_policy(east), longer, 30, 126);
        REQUIRE(d4.episodes.size() == d8.episodes.size());
        for (size_t i = 0; i < d4.episodes.size(); ++i)
            CHECK(d4.episodes[i].episode.steps[0].state == d8.episodes[i].episode.steps[0].state);
    }

    SUBCASE("missing or inconsistent policies are rejected") {
        TeamPolicy broken = team_policy(east);
        broken.adversary = nullptr;
        CHECK_THROWS_AS(backdoorl_collect(env, team_policy(stay), broken, cfg, 4, 127),
                        std::invalid_argument);

        QmixConfig other = small_qmix();
        other.adversary_index = 1;
        QmixLearner flipped(env.spec(), other, 128);
        CHECK_THROWS_WITH_AS(
            backdoorl_collect(env, team_policy(stay), team_policy(flipped), cfg, 4, 129),
            doctest::Contains("disagree"), std::invalid_argument);

        CHECK_THROWS_AS(backdoorl_collect(env, team_policy(stay), team_policy(east), cfg, 0, 130),
                        std::invalid_argument);
    }
}

TEST_CASE("collected trigger windows have the pinned length") {
    CoopGridConfig g;
    g.width = 8;
    g.height = 8;
    g.n_agents = 2;
    g.n_targets = 2;
    g.observation_radius = 2;
    g.episode_limit = 12;
    CoopGrid env(g);
    QmixLearner stay(env.spec(), small_qmix(), 131);
    QmixLearner east(env.spec(), small_qmix(), 132);
    rig_constant_team(stay, 0, 0);
    rig_constant_team(east, 4, 4);

    BackdoorlConfig cfg;
    cfg.p_tri = 1.0;
    cfg.n_tri = 5;
    CloneDataset ds = backdoorl_collect(env, team_policy(stay), team_policy(east), cfg, 40, 133);

    std::vector<const Episode*> full_length;
    for (const CloneEpisode& ce : ds.episodes)
        if (ce.episode.length() == g.episode_limit) full_length.push_back(&ce.episode);
    REQUIRE(full_length.size() > 10);
    TriggerCountStats stats = trigger_count_stats(full_length);
    CHECK(stats.mean == doctest::Approx(5.0));
    CHECK(stats.stddev == doctest::Approx(0.0));
}

TEST_CASE("behavior cloning reproduces a deterministic source on held-out episodes") {
    CoopGrid env(small_grid());
    QmixLearner source(env.spec(), small_qmix(), 134);
    rig_constant_team(source, 1, 2);

    BackdoorlConfig cfg;
    cfg.p_tri = 0.0;
    CloneDataset train = backdoorl_collect(env, team_policy(source), team_policy(source), cfg, 40, 135);
    CloneDataset held_out =
        backdoorl_collect(env, team_policy(source), team_policy(source), cfg, 20, 136);

    QmixLearner cloned(env.spec(), small_qmix(), 137);
    RmsPropConfig optim;
    optim.learning_rate = 0.02;
    CloneReport report = behavior_clone(train, cloned, 250, optim);
    CHECK(report.epochs == 250);
    CHECK(report.final_loss < report.initial_loss);
    CHECK(clone_accuracy(held_out, cloned) > 0.99);
}

TEST_CASE("behavior cloning resolves contradictions by majority") {
    CloneDataset ds;
    ds.n_agents = 2;
    ds.adversary_index = 0;
    ds.episodes.push_back(fixed_obs_episode(2, 0, false));
    ds.episodes.push_back(fixed_obs_episode(2, 0, false));
    ds.episodes.push_back(fixed_obs_episode(2, 1, false));

    QmixLearner learner(tiny_spec(), small_qmix(), 138);
    RmsPropConfig optim;
    optim.learning_rate = 0.02;
    CloneReport report = behavior_clone(ds, learner, 600, optim);
    CHECK(report.final_loss < report.initial_loss);

    // Two of three teammate labels say action 0; the adversary is unanimous.
    EvalScratch scratch;
    std::vector<double> q, hidden(4, 0.0);
    learner.teammate(1).eval_step({0.2, 0.5, 0.9}, hidden, q, scratch);
    CHECK(std::max_element(q.begin(), q.end()) - q.begin() == 0);
    CHECK(clone_accuracy(ds, learner) == doctest::Approx(5.0 / 6.0));

    SUBCASE("bad corpora are rejected") {
        CloneDataset empty;
        empty.n_agents = 2;
        CHECK_THROWS_AS(behavior_clone(empty, learner, 10, optim), std::invalid_argument);
        CHECK_THROWS_AS(behavior_clone(ds, learner, 0, optim), std::invalid_argument);
        CloneDataset mismatched = ds;
        mismatched.n_agents = 3;
        CHECK_THROWS_AS(behavior_clone(mismatched, learner, 10, optim), std::invalid_argument);
        CHECK_THROWS_AS(clone_accuracy(empty, learner), std::invalid_argument);
    }
}

TEST_CASE("cloned adversary switches behavior on the binary input") {
    CloneDataset ds;
    ds.n_agents = 2;
    ds.adversary_index = 0;
    for (int i = 0; i < 20; ++i) ds.episodes.push_back(fixed_obs_episode(1, 0, false));
    for (int i = 0; i < 20; ++i) ds.episodes.push_back(fixed_obs_episode(3, 0, true));

    QmixLearner learner(tiny_spec(), small_qmix(), 139);
    RmsPropConfig optim;
    optim.learning_rate = 0.02;
    behavior_clone(ds, learner, 600, optim);

    EvalScratch scratch;
    std::vector<double> q;
    std::vector<double> hidden(4, 0.0);
    learner.adversary().eval_step({0.3, 0.7, 0.1}, 0, hidden, q, scratch);
    CHECK(std::max_element(q.begin(), q.end()) - q.begin() == 1);
    hidden.assign(4, 0.0);
    learner.adversary().eval_step({0.3, 0.7, 0.1}, 1, hidden, q, scratch);
    CHECK(std::max_element(q.begin(), q.end()) - q.begin() == 3);
    CHECK(clone_accuracy(ds, learner) == 1.0);
}

TEST_CASE("cloning a benign-only corpus preserves the source's win rate") {
    CoopGrid env(small_grid());
    QmixLearner source(env.spec(), small_qmix(), 140);
    rig_constant_team(source, 0, 0);

    BackdoorlConfig cfg;
    cfg.p_tri = 0.0;
    CloneDataset train = backdoorl_collect(env, team_policy(source), team_policy(source), cfg, 40, 141);
    QmixLearner cloned(env.spec(), small_qmix(), 142);
    RmsPropConfig optim;
    optim.learning_rate = 0.02;
    behavior_clone(train, cloned, 250, optim);

    ForcedTriggerDriver none(0);
    EvalReport w_source = summarize(run_episodes(env, team_policy(source), none, 0, 64, 143));
    EvalReport w_cloned = summarize(run_episodes(env, team_policy(cloned), none, 0, 64, 143));
    CHECK(w_source.win_rate > 0.0);  // staying wins when a layout starts around a target
    CHECK(std::abs(w_source.win_rate - w_cloned.win_rate) <= 0.05);
}

TEST_CASE("longer trigger windows push teammate observations further from benign") {
    CoopGridConfig g;
    g.width = 8;
    g.height = 8;
    g.n_agents = 2;
    g.n_targets = 2;
    g.observation_radius = 2;
    g.episode_limit = 24;
    CoopGrid env(g);
    const DecPomdpSpec spec = env.spec();

    QmixLearner stay(spec, small_qmix(), 144);
    QmixLearner malicious(spec, small_qmix(), 145);
    rig_constant_team(stay, 0, 0);
    // Teammates keep the benign behavior; only the adversary deviates, so a
    // teammate's view departs from benign exactly from the window start, and
    // the window length alone decides how much of the episode deviates (a
    // longer window clamps the start earlier on average).
    rig_constant_team(malicious, 0, 4);

    // Collections sharing a seed replay the same layouts regardless of the
    // trigger settings, so the detector memorizes the benign version of
    // precisely the rows the abnormal collections revisit.
    BackdoorlConfig cfg;
    cfg.p_tri = 0.0;
    cfg.n_tri = 5;
    CloneDataset benign_data =
        backdoorl_collect(env, team_policy(stay), team_policy(malicious), cfg, 60, 148);
    std::vector<const Episode*> benign_ptrs;
    for (const CloneEpisode& ce : benign_data.episodes) benign_ptrs.push_back(&ce.episode);
    Tensor benign_rows = teammate_observations(benign_ptrs, 0, spec.n_agents, spec.observation_width);

    RndConfig rc;
    rc.hidden = 32;
    rc.out = 16;
    rc.optim.learning_rate = 3e-3;
    RndModule rnd(spec.observation_width, rc, 147);
    for (int i = 0; i < 800; ++i) rnd.update_rows(benign_rows);

    CHECK_THROWS_AS(mean_teammate_novelty(benign_data, rnd), std::invalid_argument);

    cfg.p_tri = 1.0;
    BackdoorlConfig ten = cfg;
    ten.n_tri = 10;
    CloneDataset d5 = backdoorl_collect(env, team_policy(stay), team_policy(malicious), cfg, 60, 148);
    CloneDataset d10 = backdoorl_collect(env, team_policy(stay), team_policy(malicious), ten, 60, 148);

    std::vector<double> trained = rnd.novelty_batch(benign_rows);
    double benign_mean = 0.0;
    for (double v : trained) benign_mean += v;
    benign_mean /= static_cast<double>(trained.size());

    double m5 = mean_teammate_novelty(d5, rnd);
    double m10 = mean_teammate_novelty(d10, rnd);
    CHECK(m5 > benign_mean);
    CHECK(m10 > benign_mean);
    CHECK(m10 > m5);
}

TEST_CASE("cloning pipeline emits pretrain rows and a final evaluation") {
    CoopGridConfig g = small_grid();
    AttackConfig cfg;
    cfg.step_limit = 800;
    cfg.benign_period = 100;
    cfg.batch_size = 8;
    cfg.buffer_capacity = 64;
    cfg.target_refresh_episodes = 20;
    cfg.eval_interval = 300;
    cfg.epsilon.anneal_steps = 400;
    BackdoorlConfig bdl;
    bdl.p_tri = 0.5;
    bdl.n_tri = 2;
    bdl.clone_epochs = 25;
    bdl.pretrain_steps = 400;
    bdl.collect_episodes = 48;
    bdl.eval_episodes = 16;
    bdl.clone_optim.learning_rate = 0.02;

    struct Capture {
        std::vector<Episode> episodes;
        std::vector<MetricsRow> rows;
        std::vector<std::string> tags;
    };
    auto run_once = [&](Capture& cap) {
        CoopGrid env(g);
        QmixLearner cloned(env.spec(), small_qmix(), 149);
        RndConfig rc;
        rc.hidden = 8;
        rc.out = 4;
        RndModule rnd(env.spec().observation_width, rc, 150);
        RunHooks hooks;
        hooks.on_episode = [&](const Episode& ep) { cap.episodes.push_back(ep); };
        hooks.on_metrics = [&](const MetricsRow& row) { cap.rows.push_back(row); };
        hooks.save_checkpoint = [&](const std::string& tag) { cap.tags.push_back(tag); };
        return run_backdoorl(env, cloned, rnd, cfg, bdl, hooks, 151);
    };

    Capture cap;
    RunResult result = run_once(cap);

    REQUIRE(cap.rows.size() == 3);
    CHECK(cap.rows[0].step == 300);  // benign pretrain
    CHECK(cap.rows[0].qmix_loss > 0.0);
    CHECK(cap.rows[0].rnd_loss > 0.0);
    CHECK(cap.rows[1].step == 700);  // malicious pretrain, shifted
    CHECK(cap.rows[1].qmix_loss > 0.0);
    CHECK(cap.rows[1].rnd_loss == 0.0);
    CHECK(cap.rows[2].step == 800);  // final evaluation of the cloned policy
    CHECK(cap.rows[2].qmix_loss == 0.0);
    CHECK(cap.rows[2].benign_win_rate >= 0.0);
    CHECK(cap.rows[2].benign_win_rate <= 1.0);
    CHECK(cap.rows[2].abnormal_fail_rate >= 0.0);
    CHECK(cap.rows[2].abnormal_fail_rate <= 1.0);
    CHECK(cap.rows[2].mean_trigger_count > 0.0);
    CHECK(std::isfinite(cap.rows[2].diff_obs));
    CHECK(cap.tags == std::vector<std::string>{"final"});

    long length_sum = 0;
    for (size_t i = 0; i < cap.episodes.size(); ++i) {
        CHECK(cap.episodes[i].serial == i);
        length_sum += cap.episodes[i].length();
    }
    CHECK(result.episodes == cap.episodes.size());
    CHECK(result.t_total == length_sum);

    SUBCASE("the pipeline is reproducible") {
        Capture again;
        run_once(again);
        REQUIRE(again.rows.size() == cap.rows.size());
        for (size_t i = 0; i < cap.rows.size(); ++i) CHECK(rows_close(cap.rows[i], again.rows[i]));
        check_same_trajectories(cap.episodes, again.episodes);
    }

    SUBCASE("a window longer than the episode limit is rejected") {
        CoopGrid env(g);
        QmixLearner cloned(env.spec(), small_qmix(), 152);
        RndConfig rc;
        rc.hidden = 8;
        rc.out = 4;
        RndModule rnd(env.spec().observation_width, rc, 153);
        BackdoorlConfig bad = bdl;
        bad.n_tri = 7;
        CHECK_THROWS_AS(run_backdoorl(env, cloned, rnd, cfg, bad, RunHooks{}, 154),
                        std::invalid_argument);
    }
}
