#include <cmath>
#include <cstring>
#include <random>
#include <stdexcept>
#include <vector>

#include "batmarl/evalmetrics.hpp"
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

QmixConfig small_qmix() {
    QmixConfig cfg;
    cfg.hidden = 4;
    cfg.mixing_embed = 3;
    return cfg;
}

TriggerConfig small_trigger(const DecPomdpSpec& spec) {
    TriggerConfig cfg;
    cfg.hidden = 4;
    cfg.value_hidden = 4;
    cfg.n_agents = spec.n_agents;
    return cfg;
}

Parameter* named(std::vector<Parameter*> ps, const std::string& name) {
    for (Parameter* p : ps)
        if (p->name == name) return p;
    REQUIRE(false);
    return nullptr;
}

// Pin the trigger policy's decision: clearing every weight makes the logits
// equal the output biases.
void force_decision(TriggerModule& trigger, int d) {
    for (Parameter* p : trigger.policy().parameters()) p->value.fill(0.0);
    named(trigger.policy().parameters(), "trigger.out.b")->value =
        Tensor({2}, d == 1 ? std::vector<double>{-20.0, 20.0} : std::vector<double>{20.0, -20.0});
}

Episode counted_episode(int triggers, int len) {
    Episode ep;
    ep.y = 1;
    for (int t = 0; t < len; ++t) {
        EpisodeStep s;
        s.reward = 1.0;
        if (t < triggers) {
            s.d = 1;
            s.eff = 1;
        }
        ep.steps.push_back(std::move(s));
    }
    return ep;
}

}  // namespace

TEST_CASE("setting and mode names round-trip and reject unknowns") {
    CHECK(parse_setting("Benign") == EvalSetting::benign);
    CHECK(parse_setting("Mixed_team") == EvalSetting::mixed_team);
    CHECK(parse_setting("Backdoor") == EvalSetting::backdoor);
    for (EvalSetting s : {EvalSetting::benign, EvalSetting::mixed_team, EvalSetting::backdoor})
        CHECK(parse_setting(setting_name(s)) == s);
    CHECK_THROWS_WITH_AS(parse_setting("benign"), doctest::Contains("Mixed_team"),
                         std::invalid_argument);
    CHECK(parse_mode("benign") == EvalMode::benign);
    CHECK(parse_mode("abnormal") == EvalMode::abnormal);
    CHECK(parse_mode(mode_name(EvalMode::abnormal)) == EvalMode::abnormal);
    CHECK_THROWS_AS(parse_mode("Abnormal"), std::invalid_argument);
}

TEST_CASE("summaries aggregate wins, returns and trigger counts") {
    std::vector<Episode> eps;
    eps.push_back(counted_episode(2, 4));  // return 4
    eps.push_back(counted_episode(0, 2));  // return 2
    eps[0].won = true;
    EvalReport r = summarize(eps);
    CHECK(r.episodes == 2);
    CHECK(r.win_rate == 0.5);
    CHECK(r.fail_rate == 0.5);
    CHECK(r.mean_return == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(r.std_return == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(r.mean_trigger_count == doctest::Approx(1.0).epsilon(1e-12));
    CHECK_THROWS_AS(summarize({}), std::invalid_argument);
}

TEST_CASE("trigger count statistics require abnormal episodes") {
    Episode a = counted_episode(2, 6), b = counted_episode(4, 6), c = counted_episode(6, 6);
    TriggerCountStats stats = trigger_count_stats({&a, &b, &c});
    CHECK(stats.mean == doctest::Approx(4.0).epsilon(1e-12));
    CHECK(stats.stddev == doctest::Approx(std::sqrt(8.0 / 3.0)).epsilon(1e-12));

    TriggerCountStats single = trigger_count_stats({&a});
    CHECK(single.mean == 2.0);
    CHECK(single.stddev == 0.0);

    Episode benign = counted_episode(0, 6);
    CHECK_THROWS_WITH_AS(trigger_count_stats({&a, &benign}), doctest::Contains("contract violation"),
                         std::runtime_error);
    CHECK_THROWS_AS(trigger_count_stats({}), std::invalid_argument);
}

TEST_CASE("the observation difference score is a difference of mean novelties") {
    RndConfig cfg;
    cfg.hidden = 8;
    cfg.out = 4;
    RndModule rnd(3, cfg, 90);
    std::mt19937_64 rng(91);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    Tensor pool = Tensor::zeros({40, 3});
    for (auto& v : pool.values) v = unit(rng);

    CHECK(diff_obs_metric(rnd, pool, pool) == 0.0);

    Tensor probe = Tensor::full({10, 3}, -1.0);
    auto mean_of = [&](const Tensor& rows) {
        std::vector<double> n = rnd.novelty_batch(rows);
        double acc = 0.0;
        for (double v : n) acc += v;
        return acc / static_cast<double>(n.size());
    };
    CHECK(diff_obs_metric(rnd, pool, probe) ==
          doctest::Approx(mean_of(probe) - mean_of(pool)).epsilon(1e-10));

    // After memorizing the pool, off-distribution rows score higher.
    for (int it = 0; it < 800; ++it) rnd.update_rows(pool);
    CHECK(diff_obs_metric(rnd, pool, probe) > 0.0);

    CHECK_THROWS_AS(diff_obs_metric(rnd, Tensor::zeros({1, 3}), Tensor()), std::invalid_argument);
}

TEST_CASE("teammate observation collection spans all steps and skips the adversary") {
    Episode ep = counted_episode(1, 3);
    for (int t = 0; t < 3; ++t)
        ep.steps[static_cast<size_t>(t)].obs = {{9.0, 9.0}, {static_cast<double>(t), 1.0}};
    Tensor rows = teammate_observations({&ep}, 0, 2, 2);
    REQUIRE(rows.rows() == 3);
    for (int t = 0; t < 3; ++t) {
        CHECK(rows.at(t, 0) == static_cast<double>(t));
        CHECK(rows.at(t, 1) == 1.0);
    }
    CHECK_THROWS_AS(teammate_observations({}, 0, 2, 2), std::invalid_argument);
    CHECK_THROWS_AS(teammate_observations({&ep}, 0, 2, 5), std::invalid_argument);
}

TEST_CASE("evaluation is reproducible, greedy and side-effect free") {
    CoopGrid env(small_grid());
    QmixLearner learner(env.spec(), small_qmix(), 92);
    TriggerModule trigger(env.spec().observation_width, env.spec().state_width,
                          small_trigger(env.spec()), 93);

    EvalBundle bundle;
    bundle.benign_learner = &learner;
    bundle.benign_trigger = &trigger;

    auto before_learner = [&] {
        std::vector<std::vector<double>> snap;
        for (Parameter* p : learner.all_parameters()) snap.push_back(p->value.values);
        return snap;
    }();
    auto before_trigger = [&] {
        std::vector<std::vector<double>> snap;
        for (Parameter* p : trigger.parameters()) snap.push_back(p->value.values);
        return snap;
    }();

    EvalReport a = evaluate(env, bundle, EvalSetting::benign, EvalMode::benign, 16, 94);
    EvalReport b = evaluate(env, bundle, EvalSetting::benign, EvalMode::benign, 16, 94);
    CHECK(a.win_rate == b.win_rate);
    CHECK(a.mean_return == b.mean_return);
    CHECK(a.std_return == b.std_return);
    CHECK(a.win_rate + a.fail_rate == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(a.win_rate >= 0.0);
    CHECK(a.win_rate <= 1.0);
    CHECK(a.episodes == 16);

    {
        size_t i = 0;
        for (Parameter* p : learner.all_parameters()) CHECK(p->value.values == before_learner[i++]);
        i = 0;
        for (Parameter* p : trigger.parameters()) CHECK(p->value.values == before_trigger[i++]);
    }

    // The report matches a manual pass over the same episodes.
    TeamPolicy team = team_policy(learner);
    PolicyTriggerDriver driver(trigger);
    std::vector<Episode> eps = run_episodes(env, team, driver, 0, 16, 94);
    int wins = 0;
    double sum = 0.0;
    for (const Episode& ep : eps) {
        if (ep.won) ++wins;
        sum += ep.undiscounted_return();
    }
    CHECK(a.win_rate == doctest::Approx(wins / 16.0).epsilon(1e-12));
    CHECK(a.mean_return == doctest::Approx(sum / 16.0).epsilon(1e-12));
}

TEST_CASE("settings draw their networks from the right checkpoints") {
    CoopGrid env(small_grid());
    QmixLearner benign_learner(env.spec(), small_qmix(), 95);
    QmixLearner backdoor_learner(env.spec(), small_qmix(), 96);
    TriggerModule benign_trigger(env.spec().observation_width, env.spec().state_width,
                                 small_trigger(env.spec()), 97);
    TriggerModule backdoor_trigger(env.spec().observation_width, env.spec().state_width,
                                   small_trigger(env.spec()), 98);
    force_decision(benign_trigger, 0);
    force_decision(backdoor_trigger, 1);

    EvalBundle bundle;
    bundle.benign_learner = &benign_learner;
    bundle.benign_trigger = &benign_trigger;
    bundle.backdoor_learner = &backdoor_learner;
    bundle.backdoor_trigger = &backdoor_trigger;

    // The benign team never triggers, so granting permission changes nothing:
    // identical seeds give identical outcomes in both modes.
    EvalReport ben = evaluate(env, bundle, EvalSetting::benign, EvalMode::benign, 12, 99);
    EvalReport abn = evaluate(env, bundle, EvalSetting::benign, EvalMode::abnormal, 12, 99);
    CHECK(ben.win_rate == abn.win_rate);
    CHECK(ben.mean_return == abn.mean_return);
    CHECK(abn.mean_trigger_count == 0.0);

    // The backdoored settings use the always-trigger policy.
    EvalReport mixed = evaluate(env, bundle, EvalSetting::mixed_team, EvalMode::abnormal, 12, 99);
    CHECK(mixed.mean_trigger_count > 0.0);
    EvalReport back = evaluate(env, bundle, EvalSetting::backdoor, EvalMode::abnormal, 12, 99);
    CHECK(back.mean_trigger_count > 0.0);
    // Without permission no trigger is effective in any setting.
    EvalReport back_ben = evaluate(env, bundle, EvalSetting::backdoor, EvalMode::benign, 12, 99);
    CHECK(back_ben.mean_trigger_count == 0.0);

    SUBCASE("missing checkpoints are reported by name") {
        EvalBundle no_backdoor;
        no_backdoor.benign_learner = &benign_learner;
        no_backdoor.benign_trigger = &benign_trigger;
        CHECK_THROWS_WITH_AS(
            evaluate(env, no_backdoor, EvalSetting::backdoor, EvalMode::benign, 4, 1),
            doctest::Contains("backdoor"), std::invalid_argument);
        CHECK_THROWS_WITH_AS(
            evaluate(env, no_backdoor, EvalSetting::mixed_team, EvalMode::benign, 4, 1),
            doctest::Contains("backdoor"), std::invalid_argument);
        EvalBundle empty;
        CHECK_THROWS_WITH_AS(evaluate(env, empty, EvalSetting::benign, EvalMode::benign, 4, 1),
                             doctest::Contains("benign"), std::invalid_argument);
        CHECK_THROWS_AS(evaluate(env, bundle, EvalSetting::benign, EvalMode::benign, 0, 1),
                        std::invalid_argument);
    }
}

TEST_CASE("the training snapshot assembles the evaluation columns") {
    CoopGrid env(small_grid());
    QmixLearner learner(env.spec(), small_qmix(), 100);
    TriggerModule trigger(env.spec().observation_width, env.spec().state_width,
                          small_trigger(env.spec()), 101);
    RndConfig rc;
    rc.hidden = 6;
    rc.out = 4;
    RndModule rnd(env.spec().observation_width, rc, 102);

    force_decision(trigger, 1);
    EvalSnapshot snap = training_snapshot(env, learner, trigger, rnd, 8, 103);
    CHECK(snap.benign_win_rate >= 0.0);
    CHECK(snap.benign_win_rate <= 1.0);
    CHECK(snap.abnormal_fail_rate >= 0.0);
    CHECK(snap.abnormal_fail_rate <= 1.0);
    // Permission plus an always-trigger policy: a trigger at every step.
    CHECK(snap.mean_trigger_count > 0.0);
    CHECK(std::isfinite(snap.diff_obs));

    EvalSnapshot again = training_snapshot(env, learner, trigger, rnd, 8, 103);
    CHECK(snap.benign_win_rate == again.benign_win_rate);
    CHECK(snap.abnormal_fail_rate == again.abnormal_fail_rate);
    CHECK(snap.mean_trigger_count == again.mean_trigger_count);
    CHECK(snap.diff_obs == again.diff_obs);
}
