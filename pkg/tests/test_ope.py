import numpy as np
import pytest

from careql.dataset import N_ACTIONS
from careql.ope import (
    BehaviorFitConfig,
    FqeNetConfig,
    LoggedBehavior,
    OpeConfig,
    OpeError,
    TabularPolicy,
    TabularQ,
    dr,
    evaluate_policy,
    fit_behavior,
    fqe_network,
    fqe_tabular,
    opera,
    wis,
)
from careql.synthgym import (
    BehaviorPolicy,
    GeneratorConfig,
    TabularMDP,
    eps_soft_matrix,
    exact_policy_value,
    generate_mdp,
    near_clinician_behavior,
    rollout,
    state_values,
)

GAMMA = 0.95
MAX_LEN = 18


@pytest.fixture(scope="module")
def synth():
    """5-state chain, behavior eps=0.3, a distinct eps-soft target policy."""
    cfg = GeneratorConfig(n_severity=5, n_context=1, n_features=6, d_n=4,
                          gamma=GAMMA, min_gap=0.0)
    mdp = generate_mdp(cfg, seed=0)
    behavior = near_clinician_behavior(mdp, 0.3)
    dataset = rollout(mdp, behavior, n_episodes=2000, max_len=MAX_LEN, seed=1)
    target = TabularPolicy(eps_soft_matrix(mdp.optimal_action, N_ACTIONS, eps=0.05))
    oracle = exact_policy_value(mdp, target.probs, gamma=GAMMA, horizon=MAX_LEN)
    return mdp, behavior, dataset, target, oracle


def deterministic_chain_mdp():
    """Action-independent deterministic drift; every episode lasts 2 steps."""
    S = 4
    transition = np.zeros((S, N_ACTIONS, S))
    transition[0, :, 1] = 1.0
    transition[1, :, 2] = 1.0   # resolve into survival
    transition[2, :, 2] = 1.0
    transition[3, :, 3] = 1.0
    terminal_prob = np.zeros((S, N_ACTIONS))
    terminal_prob[1:] = 1.0
    absorbing = np.zeros(S, dtype=bool)
    absorbing[2:] = True
    rng = np.random.default_rng(0)
    return TabularMDP(
        transition=transition, reward_terminal=np.array([1.0, 1.0, 1.0, -1.0]),
        terminal_prob=terminal_prob, absorbing=absorbing, gamma=GAMMA,
        initial_dist=np.array([1.0, 0, 0, 0]),
        emission_l_mean=np.eye(S, 5), emission_l_noise=0.0,
        emission_n_proto=rng.normal(size=(S, 4)), emission_n_noise=0.0,
        note_present_prob=np.array([1.0, 1.0, 0.0, 0.0]),
        context_prototype=rng.normal(size=(S, 4)), first_frame_note_prob=1.0,
        n_severity=2, n_context=1,
        severity_of=np.array([0, 1, -1, -1]), context_of=np.array([0, 0, -1, -1]),
        optimal_action=np.zeros(S, dtype=np.int64),
    )


def q_pi_table(mdp, pi):
    v = state_values(mdp, pi, gamma=mdp.gamma)
    term = mdp.absorbing.astype(float)
    return mdp.transition @ (term * mdp.reward_terminal) \
        + mdp.gamma * (mdp.transition * (1 - term)[None, None, :]) @ v


class TestWis:
    def test_behavior_evaluates_to_mean_return(self, synth):
        mdp, behavior, dataset, _, _ = synth
        target = TabularPolicy(behavior.probs)
        result = wis(dataset, target, LoggedBehavior(), GAMMA)
        returns = np.array([ep.discounted_return(GAMMA) for ep in dataset.episodes])
        assert result.estimate == pytest.approx(returns.mean(), abs=1e-12)
        assert np.allclose(result.weights, 1.0)

    def test_single_episode_returns_its_return(self, synth):
        _, _, dataset, target, _ = synth
        ep = dataset.episodes[0]
        result = wis(dataset, target, LoggedBehavior(), GAMMA, episodes=[ep])
        assert result.estimate == pytest.approx(ep.discounted_return(GAMMA))

    def test_estimate_bounded_by_observed_returns(self, synth):
        _, _, dataset, target, _ = synth
        result = wis(dataset, target, LoggedBehavior(), GAMMA)
        assert result.returns.min() - 1e-12 <= result.estimate
        assert result.estimate <= result.returns.max() + 1e-12

    def test_close_to_oracle_on_synthetic(self, synth):
        _, _, dataset, target, oracle = synth
        result = wis(dataset, target, LoggedBehavior(), GAMMA)
        # bootstrap SE via report happens elsewhere; coarse bound here
        assert abs(result.estimate - oracle) < 0.1

    def test_zero_behavior_probability_rejected(self, synth):
        from dataclasses import replace

        _, _, dataset, target, _ = synth
        ep = dataset.episodes[0]
        bad = replace(ep, transitions=tuple(
            replace(tr, behavior_prob=None) for tr in ep.transitions))
        with pytest.raises(OpeError, match="behavior"):
            wis(dataset, target, LoggedBehavior(), GAMMA, episodes=[bad])


class TestFqeTabular:
    def empirical_dp_value(self, episodes, pi, gamma, n_states):
        """Independent linear solve of the empirical Bellman system."""
        sums = np.zeros((n_states, N_ACTIONS))
        counts = np.zeros((n_states, N_ACTIONS))
        flows = {}
        for ep in episodes:
            for tr in ep.transitions:
                s, a = tr.state_id, tr.action.flat
                counts[s, a] += 1
                sums[s, a] += tr.reward
                if not tr.done:
                    flows[(s, a, tr.next_state_id)] = flows.get(
                        (s, a, tr.next_state_id), 0) + 1
        M = np.zeros((n_states, n_states))
        c = np.zeros(n_states)
        for s in range(n_states):
            for a in range(N_ACTIONS):
                if counts[s, a] == 0 or pi[s, a] == 0:
                    continue
                c[s] += pi[s, a] * sums[s, a] / counts[s, a]
                for (s2, a2, ns), k in flows.items():
                    if s2 == s and a2 == a:
                        M[s, ns] += pi[s, a] * gamma * k / counts[s, a]
        v = np.linalg.solve(np.eye(n_states) - M, c)
        init = [v[ep.transitions[0].state_id] for ep in episodes]
        return float(np.mean(init))

    def test_matches_independent_linear_solve(self, synth):
        mdp, _, dataset, target, _ = synth
        subset = list(dataset.episodes[:800])
        result = fqe_tabular(dataset, target.probs, GAMMA, mdp.n_states,
                             episodes=subset)
        expected = self.empirical_dp_value(subset, target.probs, GAMMA,
                                           mdp.n_states)
        assert result.estimate == pytest.approx(expected, abs=1e-6)

    def test_gamma_zero_gives_mean_immediate_reward(self, synth):
        mdp, _, dataset, target, _ = synth
        result = fqe_tabular(dataset, target.probs, 0.0, mdp.n_states)
        # with gamma=0, Q(s,a) is the empirical mean immediate reward
        sums = np.zeros((mdp.n_states, N_ACTIONS))
        counts = np.zeros((mdp.n_states, N_ACTIONS))
        for ep in dataset.episodes:
            for tr in ep.transitions:
                counts[tr.state_id, tr.action.flat] += 1
                sums[tr.state_id, tr.action.flat] += tr.reward
        q = sums / np.maximum(counts, 1.0)
        expected = np.mean([
            float(target.probs[ep.transitions[0].state_id]
                  @ q[ep.transitions[0].state_id])
            for ep in dataset.episodes])
        assert result.estimate == pytest.approx(expected, abs=1e-9)

    def test_close_to_true_dp_value(self, synth):
        mdp, _, dataset, target, oracle = synth
        result = fqe_tabular(dataset, target.probs, GAMMA, mdp.n_states)
        assert abs(result.estimate - oracle) < 0.1


class TestFqeNetwork:
    def test_close_to_oracle(self, synth):
        mdp, _, dataset, target, oracle = synth
        cfg = FqeNetConfig(iterations=15, steps_per_iteration=80, width=32,
                           depth=2, seed=0)
        result = fqe_network(dataset, target, GAMMA, cfg,
                             episodes=list(dataset.episodes[:1000]))
        assert abs(result.estimate - oracle) < 0.15

    def test_gamma_zero_matches_mean_immediate_reward(self, synth):
        # with gamma=0 the value is the mean immediate reward of the target
        # policy at initial states; the tabular solve computes it exactly
        mdp, _, dataset, target, _ = synth
        cfg = FqeNetConfig(iterations=6, steps_per_iteration=120, width=32,
                           seed=0)
        subset = list(dataset.episodes[:500])
        result = fqe_network(dataset, target, 0.0, cfg, episodes=subset)
        exact = fqe_tabular(dataset, target.probs, 0.0, mdp.n_states,
                            episodes=subset)
        assert abs(result.estimate - exact.estimate) < 0.05


class TestDr:
    def test_zero_model_reduces_to_pdis(self, synth):
        _, _, dataset, target, _ = synth
        subset = list(dataset.episodes[:300])
        estimate = dr(dataset, target, LoggedBehavior(), None, GAMMA,
                      episodes=subset)
        # explicit self-normalized per-decision importance sampling
        n = len(subset)
        t_max = max(len(ep) for ep in subset)
        rho = np.ones((n, t_max))
        rewards = np.zeros((n, t_max))
        for i, ep in enumerate(subset):
            pi = target.episode_action_probs(ep)
            beta = LoggedBehavior().episode_logged_probs(ep)
            acts = [tr.action.flat for tr in ep.transitions]
            ratios = pi[np.arange(len(acts)), acts] / beta
            cum = np.cumprod(ratios)
            rho[i, :len(acts)] = cum
            rho[i, len(acts):] = cum[-1]
            rewards[i, :len(acts)] = [tr.reward for tr in ep.transitions]
        w = rho / rho.sum(axis=0, keepdims=True)
        pdis = float((GAMMA ** np.arange(t_max)) @ (w * rewards).sum(axis=0))
        assert estimate == pytest.approx(pdis, abs=1e-12)

    def test_exact_model_on_deterministic_mdp_is_exact(self):
        mdp = deterministic_chain_mdp()
        behavior = BehaviorPolicy(np.full((4, N_ACTIONS), 1.0 / N_ACTIONS))
        dataset = rollout(mdp, behavior, n_episodes=60, seed=3)
        target = TabularPolicy(eps_soft_matrix(np.array([4, 9, 0, 0]),
                                               N_ACTIONS, eps=0.2))
        q_model = TabularQ(q_pi_table(mdp, target.probs))
        estimate = dr(dataset, target, LoggedBehavior(), q_model, GAMMA)
        truth = exact_policy_value(mdp, target.probs, gamma=GAMMA)
        assert estimate == pytest.approx(truth, abs=1e-6)

    def test_dr_corrects_model_bias_better_than_direct_method(self, synth):
        mdp, behavior, _, target, _ = synth
        oracle_inf = exact_policy_value(mdp, target.probs, gamma=GAMMA)
        wins = 0
        for seed in range(5):
            ds = rollout(mdp, behavior, n_episodes=1500, max_len=MAX_LEN,
                         seed=100 + seed)
            biased = TabularQ(q_pi_table(mdp, target.probs) + 0.2)
            dm = np.mean([
                float(target.probs[ep.transitions[0].state_id]
                      @ biased.q[ep.transitions[0].state_id])
                for ep in ds.episodes])
            dr_est = dr(ds, target, LoggedBehavior(), biased, GAMMA,
                        episodes=list(ds.episodes))
            if abs(dr_est - oracle_inf) < abs(dm - oracle_inf):
                wins += 1
        assert wins >= 4


class TestOpera:
    def test_identical_estimators_return_common_value(self):
        reps = np.random.default_rng(0).normal(size=200)
        result = opera([("a", 0.5, reps), ("b", 0.5, reps), ("c", 0.5, reps)])
        assert result.estimate == pytest.approx(0.5)
        w = np.array(list(result.weights.values()))
        assert np.all(w >= -1e-12)
        assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_zero_variance_component_takes_all_weight(self):
        rng = np.random.default_rng(1)
        result = opera([("noisy", 0.4, rng.normal(size=100)),
                        ("exact", 0.7, np.full(100, 0.7))])
        assert result.weights["exact"] == pytest.approx(1.0)
        assert result.estimate == pytest.approx(0.7)

    def test_weights_convex_random(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            comps = [(f"e{k}", rng.normal(), rng.normal(scale=rng.uniform(0.5, 2),
                                                        size=150))
                     for k in range(3)]
            result = opera(comps)
            w = np.array(list(result.weights.values()))
            assert np.all(w >= -1e-12)
            assert w.sum() == pytest.approx(1.0, abs=1e-9)

    def test_aggregate_beats_worst_component(self):
        rng = np.random.default_rng(3)
        truth = 1.0
        reps_good = truth + rng.normal(scale=0.05, size=300)
        reps_bad = truth + rng.normal(scale=1.0, size=300)
        result = opera([("good", reps_good.mean(), reps_good),
                        ("bad", reps_bad.mean(), reps_bad)])
        assert result.weights["good"] > result.weights["bad"]

    def test_needs_two_estimators(self):
        with pytest.raises(OpeError):
            opera([("only", 0.0, np.zeros(10))])


class TestFitBehavior:
    def test_recovers_behavior_within_tv(self):
        # every latent state is an initial state here, so all states get
        # enough visits for the 0.05 total-variation budget
        cfg = GeneratorConfig(n_severity=3, n_context=1, n_features=6, d_n=4,
                              gamma=GAMMA, min_gap=0.0)
        mdp = generate_mdp(cfg, seed=2)
        behavior = near_clinician_behavior(mdp, 0.3)
        ds = rollout(mdp, behavior, n_episodes=10_000, max_len=MAX_LEN, seed=7)
        fitted = fit_behavior(ds, cfg=BehaviorFitConfig(floor=1e-4, steps=6000,
                                                        learning_rate=2e-2,
                                                        seed=0))
        dist = fitted.action_dist(mdp.emission_l_mean[:mdp.n_states - 2])
        tv = 0.5 * np.abs(dist - behavior.probs[:mdp.n_states - 2]).sum(axis=1)
        assert tv.max() < 0.05

    def test_single_action_dataset_near_point_mass(self, synth):
        from dataclasses import replace
        from careql.dataset import ActionIndex

        _, _, dataset, _, _ = synth
        eps = []
        for ep in dataset.episodes[:200]:
            eps.append(replace(ep, transitions=tuple(
                replace(tr, action=ActionIndex.from_flat(13))
                for tr in ep.transitions)))
        fitted = fit_behavior(dataset, cfg=BehaviorFitConfig(floor=1e-3, steps=600),
                              episodes=eps)
        dist = fitted.action_dist(eps[0].transitions[0].obs.structured[None, :])[0]
        assert dist.argmax() == 13
        assert dist.min() >= 1e-3 - 1e-15

    def test_floor_holds_everywhere(self, synth):
        _, _, dataset, _, _ = synth
        fitted = fit_behavior(dataset, cfg=BehaviorFitConfig(floor=5e-3, steps=200),
                              episodes=list(dataset.episodes[:100]))
        rng = np.random.default_rng(0)
        dist = fitted.action_dist(rng.normal(size=(50, 6)))
        assert dist.min() >= 5e-3 - 1e-15
        assert np.allclose(dist.sum(axis=1), 1.0)


class TestEvaluatePolicy:
    def test_full_report_tabular_mode(self, synth):
        mdp, _, dataset, target, oracle = synth
        cfg = OpeConfig(gamma=GAMMA, n_bootstrap=100, seed=0)
        report = evaluate_policy(dataset, target, LoggedBehavior(), cfg,
                                 policy_table=target.probs,
                                 n_states=mdp.n_states)
        assert report.fqe_mode == "tabular"
        assert abs(report.wis - oracle) <= 3 * report.standard_errors["wis"] + 0.02
        assert abs(report.dr - oracle) <= 3 * report.standard_errors["dr"] + 0.02
        w = np.array(list(report.opera_weights.values()))
        assert np.all(w >= -1e-12) and w.sum() == pytest.approx(1.0, abs=1e-9)
        assert report.effective_sample_size > 10
        payload = report.to_dict()
        assert set(payload["estimates"]) == {"wis", "dr", "fqe", "opera"}

    def test_network_mode_selected_without_table(self, synth):
        _, _, dataset, target, _ = synth
        cfg = OpeConfig(gamma=GAMMA, n_bootstrap=50, seed=0,
                        fqe=FqeNetConfig(iterations=5, steps_per_iteration=40,
                                         width=16))
        report = evaluate_policy(dataset, target, LoggedBehavior(), cfg,
                                 episodes=list(dataset.episodes[:300]))
        assert report.fqe_mode == "network"
        assert np.isfinite(report.opera)
