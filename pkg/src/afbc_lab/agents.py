"""Learning algorithms: behavioral cloning, advantage-filtered BC with twin
critics, advantage filters (binary / exponential / t-test annealed /
classifier), prioritized actor sampling, and the critic-ensemble extensions.

The actor loss is the filtered negative log-likelihood of dataset actions;
the critics are trained on clipped double-Q targets (or a random-subset
ensemble minimum) and feed the 4-sample advantage estimate that drives both
the filter and the replay priorities.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import stats as scipy_stats

from .errors import ConfigError, NumericalError, UsageError
from .numkit import AdamState, MlpNet, PopArtStats, adam_step, rescale_output_layer
from .policy import SquashedGaussianPolicy

TRAIN_MODES = ("bc", "afbc_uniform", "afbc_per")
FILTER_KINDS = ("binary", "exponential", "ttest_annealed", "classifier")


@dataclass
class FilterConfig:
    kind: str = "binary"
    beta: float = 1.0               # exponential temperature
    clip_max: float = 20.0          # exponential weight cap
    popart_rescale: bool = True     # standardize advantages by PopArt sigma
    ttest_k: int = 4                # advantage estimates per side
    ttest_p_start: float = 1.0
    ttest_p_end: float = 0.05
    classifier_ensemble: int = 3
    classifier_threshold: float = 0.6
    classifier_max_std: float = 0.2

    def __post_init__(self):
        if self.kind not in FILTER_KINDS:
            raise ConfigError(f"unknown filter kind {self.kind!r}")
        if self.kind == "exponential" and self.beta <= 0:
            raise ConfigError("exponential filter needs beta > 0")
        if self.ttest_p_end > self.ttest_p_start:
            raise ConfigError("t-test p schedule must be non-increasing")


def apply_filter(filter_cfg, advantages, scale=None):
    """Per-sample non-negative weights for the BC loss.

    ``scale`` standardizes advantages before the exponential (the PopArt
    sigma when enabled); binary filtering is scale-invariant.
    """
    advantages = np.asarray(advantages, dtype=np.float64)
    if filter_cfg.kind == "binary":
        return (advantages > 0.0).astype(np.float64)
    if filter_cfg.kind == "exponential":
        scaled = advantages / scale if scale else advantages
        return np.minimum(np.exp(filter_cfg.beta * scaled), filter_cfg.clip_max)
    raise UsageError(f"apply_filter does not handle kind {filter_cfg.kind!r}")


def ttest_p_threshold(cfg, step, total_steps):
    """Linear anneal from p_start to p_end over the first half of training."""
    horizon = max(1, total_steps // 2)
    frac = min(1.0, step / horizon)
    return cfg.ttest_p_start + frac * (cfg.ttest_p_end - cfg.ttest_p_start)


class ValueNet:
    """State-value baseline for Monte-Carlo advantages."""

    def __init__(self, state_dim, hidden=(64, 64), rng=None, learning_rate=1e-4):
        self.net = MlpNet([state_dim, *hidden, 1], rng=rng)
        self.opt = AdamState(self.net, learning_rate=learning_rate)

    def value(self, states):
        return self.net.forward(np.atleast_2d(states))[:, 0]

    def regress_step(self, states, returns):
        states = np.atleast_2d(states)
        returns = np.asarray(returns, dtype=np.float64)
        pred = self.net.forward(states)
        err = pred[:, 0] - returns
        tape, _ = self.net.backward((err / len(err))[:, None])
        adam_step(self.net, tape, self.opt)
        return float(0.5 * np.mean(err**2))


def mc_advantage(value_net, return_to_go, states):
    """Empirical return-to-go minus the learned state-value baseline."""
    if return_to_go is None:
        raise UsageError("dataset carries no return-to-go annotations")
    return np.asarray(return_to_go, dtype=np.float64) - value_net.value(states)


class ClassifierFilter:
    """Ensemble of sigmoid-output nets classifying advantage sign.

    Approval requires consensus: mean confidence above the threshold with
    ensemble disagreement below the cap, so a single flipped label cannot
    change the decision.
    """

    def __init__(self, state_dim, action_dim, cfg, rng, hidden=(64, 64), learning_rate=1e-4):
        self.cfg = cfg
        self.members = []
        for _ in range(cfg.classifier_ensemble):
            net = MlpNet([state_dim + action_dim, *hidden, 1], rng=rng)
            self.members.append((net, AdamState(net, learning_rate=learning_rate)))

    def _probs(self, sa):
        logits = np.stack([net.forward(sa)[:, 0] for net, _ in self.members])
        return 1.0 / (1.0 + np.exp(-logits))

    def update(self, states, actions, advantage_signs):
        sa = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        labels = np.asarray(advantage_signs, dtype=np.float64)
        n = len(labels)
        for net, opt in self.members:
            logits = net.forward(sa)[:, 0]
            probs = 1.0 / (1.0 + np.exp(-logits))
            # d(BCE)/dlogit = p - label
            tape, _ = net.backward(((probs - labels) / n)[:, None])
            adam_step(net, tape, opt)

    def approve(self, states, actions):
        sa = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        probs = self._probs(sa)
        mean = probs.mean(axis=0)
        std = probs.std(axis=0)
        return (mean > self.cfg.classifier_threshold) & (std < self.cfg.classifier_max_std)


class AfbcAgent:
    """Actor, critic ensemble, targets, filter, and the advantage estimator."""

    def __init__(
        self,
        state_dim,
        action_dim,
        rng,
        hidden=(64, 64),
        actor_lr=1e-4,
        critic_lr=1e-4,
        gamma=0.99,
        tau_polyak=0.005,
        target_delay=2,
        k_advantage_samples=4,
        filter_cfg=None,
        use_popart=False,
        ensemble_size=2,
        redq_subset=None,
        tau_temp=0.0,
        target_warn_bound=1e6,
    ):
        if ensemble_size < 2:
            raise ConfigError("critic ensemble needs at least 2 members")
        self.redq_subset = redq_subset if redq_subset is not None else ensemble_size
        if self.redq_subset < 2 or self.redq_subset > ensemble_size:
            raise ConfigError("REDQ subset size must satisfy 2 <= m <= n")
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.gamma = gamma
        self.tau_polyak = tau_polyak
        self.target_delay = target_delay
        self.k_advantage_samples = k_advantage_samples
        self.filter_cfg = filter_cfg or FilterConfig()
        self.tau_temp = tau_temp
        self.target_warn_bound = target_warn_bound
        self.target_warnings = 0

        self.actor = SquashedGaussianPolicy(state_dim, action_dim, hidden=hidden, rng=rng)
        self.actor_opt = AdamState(self.actor.trunk, learning_rate=actor_lr)
        self.critics = [MlpNet([state_dim + action_dim, *hidden, 1], rng=rng) for _ in range(ensemble_size)]
        self.critic_opts = [AdamState(q, learning_rate=critic_lr) for q in self.critics]
        self.target_critics = [q.copy() for q in self.critics]
        self.popart = PopArtStats() if use_popart else None
        self._critic_steps = 0
        self.classifier = None
        if self.filter_cfg.kind == "classifier":
            self.classifier = ClassifierFilter(state_dim, action_dim, self.filter_cfg, rng)

    # --- critic side --------------------------------------------------------

    def q_values(self, nets, states, actions, denormalize=True):
        sa = np.concatenate([np.atleast_2d(states), np.atleast_2d(actions)], axis=1)
        qs = np.stack([net.forward(sa)[:, 0] for net in nets])
        if self.popart is not None and denormalize:
            qs = self.popart.denormalize(qs)
        return qs

    def redq_target(self, next_states, rewards, dones, rng):
        """Bellman target with a min over a random m-subset of target critics.

        With n = m = 2 this is exactly the clipped double-Q target.
        """
        next_actions, _ = self.actor.sample_action(np.atleast_2d(next_states), rng)
        qs = self.q_values(self.target_critics, next_states, next_actions)
        n = len(self.target_critics)
        if self.redq_subset == n:
            q_min = qs.min(axis=0)
        else:
            subset = rng.choice(n, size=self.redq_subset, replace=False)
            q_min = qs[subset].min(axis=0)
        y = np.asarray(rewards, dtype=np.float64) + self.gamma * (1.0 - np.asarray(dones, dtype=np.float64)) * q_min
        return y, next_actions

    def critic_update(self, batch, rng):
        """One gradient step of every critic toward the clipped target."""
        y, next_actions = self.redq_target(batch.s_next, batch.r, batch.done.astype(np.float64), rng)
        if not np.isfinite(y).all():
            raise NumericalError("NaN/Inf critic target")
        if np.abs(y).max() > self.target_warn_bound:
            self.target_warnings += 1
        weights = self._bellman_weights(batch.s_next, next_actions, rng)
        if self.popart is not None:
            # advance the statistics once, then rescale every critic head
            # (online and target) against the same old/new pair
            old_mu, old_sigma = self.popart.update(y)
            for net in self.critics + self.target_critics:
                rescale_output_layer(net, old_mu, old_sigma, self.popart.mu, self.popart.sigma)
            y_train = self.popart.normalize(y)
        else:
            y_train = y
        sa = np.concatenate([batch.s, batch.a], axis=1)
        loss = 0.0
        for net, opt in zip(self.critics, self.critic_opts):
            pred = net.forward(sa)[:, 0]
            err = pred - y_train
            loss += float(np.sum(weights * 0.5 * err**2))
            tape, _ = net.backward((weights * err)[:, None])
            adam_step(net, tape, opt)
        self._critic_steps += 1
        if self._critic_steps % self.target_delay == 0:
            for target, online in zip(self.target_critics, self.critics):
                target.polyak_from(online, self.tau_polyak)
        return loss

    def _bellman_weights(self, next_states, next_actions, rng):
        """Per-sample weights for the critic loss.

        With tau_temp == 0 (default) every sample gets weight 1/N. Otherwise
        the weights are a softmax over the batch of tau * ensemble std at the
        successor state (uncertainty-weighted updates).
        """
        n = len(np.atleast_2d(next_states))
        if self.tau_temp == 0.0 or len(self.critics) < 2:
            return np.full(n, 1.0 / n)
        qs = self.q_values(self.target_critics, next_states, next_actions)
        return weighted_critic_softmax(qs.std(axis=0), self.tau_temp)

    # --- advantage and actor side ------------------------------------------

    def advantage(self, states, actions, rng):
        """4-sample Q-based advantage estimate, in reward units."""
        states = np.atleast_2d(states)
        actions = np.atleast_2d(actions)
        q_data = self.q_values(self.critics, states, actions).mean(axis=0)
        samples = self.actor.sample_actions_batch(states, self.k_advantage_samples, rng)
        q_pi = np.zeros(len(states))
        for i in range(self.k_advantage_samples):
            q_pi += self.q_values(self.critics, states, samples[i]).mean(axis=0)
        q_pi /= self.k_advantage_samples
        return q_data - q_pi

    def filter_weights(self, batch, advantages, rng, step=0, total_steps=1):
        cfg = self.filter_cfg
        if cfg.kind in ("binary", "exponential"):
            scale = self.popart.sigma if (self.popart is not None and cfg.popart_rescale) else None
            return apply_filter(cfg, advantages, scale=scale)
        if cfg.kind == "ttest_annealed":
            p = ttest_p_threshold(cfg, step, total_steps)
            approved = self.ttest_filter_batch(batch.s, batch.a, cfg.ttest_k, p, rng)
            return approved.astype(np.float64)
        if cfg.kind == "classifier":
            self.classifier.update(batch.s, batch.a, (advantages >= 0.0).astype(np.float64))
            return self.classifier.approve(batch.s, batch.a).astype(np.float64)
        raise UsageError(f"unhandled filter kind {cfg.kind!r}")

    def ttest_filter(self, state, action, k, p_threshold, rng):
        """Paired one-sided t-test approval for a single (s, a) pair."""
        states = np.tile(np.atleast_2d(state), (1, 1))
        actions = np.tile(np.atleast_2d(action), (1, 1))
        return bool(self.ttest_filter_batch(states, actions, k, p_threshold, rng)[0])

    def ttest_filter_batch(self, states, actions, k, p_threshold, rng):
        if k < 2:
            raise UsageError("t-test filter needs k >= 2 estimates")
        if p_threshold >= 1.0:
            return np.ones(len(np.atleast_2d(states)), dtype=bool)
        states = np.atleast_2d(states)
        data_adv = np.stack([self.advantage(states, actions, rng) for _ in range(k)])
        pi_adv = []
        for _ in range(k):
            pi_actions, _ = self.actor.sample_action(states, rng)
            pi_adv.append(self.advantage(states, pi_actions, rng))
        diffs = data_adv - np.stack(pi_adv)  # (k, n)
        approved = np.zeros(states.shape[0], dtype=bool)
        for i in range(states.shape[0]):
            d = diffs[:, i]
            if np.allclose(d.std(), 0.0):
                approved[i] = d.mean() > 0.0  # degenerate samples: fall back to the sign
                continue
            result = scipy_stats.ttest_rel(data_adv[:, i], np.stack(pi_adv)[:, i], alternative="greater")
            approved[i] = result.pvalue < p_threshold
        return approved

    def actor_update(self, states, actions, weights):
        """Weighted BC gradient step; weights of 1 give plain BC."""
        loss, tape = self.actor.weighted_nll_grad(states, actions, weights)
        if not np.isfinite(loss):
            raise NumericalError("non-finite actor loss")
        adam_step(self.actor.trunk, tape, self.actor_opt)
        return loss

    def bc_update(self, states, actions):
        return self.actor_update(states, actions, np.ones(len(np.atleast_2d(states))))


def weighted_critic_softmax(stds, tau_temp):
    logits = tau_temp * np.asarray(stds, dtype=np.float64)
    logits -= logits.max()
    exp = np.exp(logits)
    return exp / exp.sum()


# --- training loop ----------------------------------------------------------


@dataclass
class TrainRecord:
    step: int
    critic_loss: float = float("nan")
    actor_loss: float = float("nan")
    approval_fraction: float = float("nan")
    adv_mean: float = float("nan")
    adv_std: float = float("nan")
    adv_negative_fraction: float = float("nan")
    eval_return: float = float("nan")
    eval_goal_rate: float = float("nan")
    adv_hist_counts: list = None
    adv_hist_edges: list = None

    def to_json_dict(self):
        out = {}
        for key, value in self.__dict__.items():
            if isinstance(value, float) and np.isnan(value):
                out[key] = None
            else:
                out[key] = value
        return out


@dataclass
class TrainingLog:
    records: list = field(default_factory=list)

    def eval_points(self):
        return [(r.step, r.eval_return) for r in self.records if not np.isnan(r.eval_return)]

    def mean_approval(self):
        vals = [r.approval_fraction for r in self.records if not np.isnan(r.approval_fraction)]
        return float(np.mean(vals)) if vals else float("nan")


def evaluate_policy(policy, env, rng, episodes):
    """Mean-action rollouts; returns (mean return, goal-reach fraction)."""
    returns = []
    goals = 0
    for _ in range(episodes):
        obs = env.reset(rng)
        total = 0.0
        while True:
            obs, reward, done = env.step(policy.mean_action(obs))
            total += reward
            if done:
                break
        returns.append(total)
        goals += int(env.terminated)
    return float(np.mean(returns)), goals / episodes


def train(
    agent,
    buffer,
    steps,
    mode,
    rng,
    env_factory=None,
    batch_size=512,
    eval_interval=1000,
    eval_episodes=10,
    log_interval=50,
    log_sink=None,
    histogram_probe=None,
):
    """Runs the offline training loop and returns a TrainingLog.

    Per step: (1) uniform critic batch -> critic update, advantage refresh,
    priority update; (2) actor batch (prioritized tree draw; uniform modes use
    a flat tree) -> advantage -> filter -> weighted BC step -> priority
    refresh; (3) periodic mean-action evaluation. ``log_sink`` receives each
    TrainRecord as it is produced (append-only).
    """
    if mode not in TRAIN_MODES:
        raise UsageError(f"unknown training mode {mode!r}; known: {TRAIN_MODES}")
    eval_env = env_factory() if env_factory is not None else None
    log = TrainingLog()
    for step in range(1, steps + 1):
        record = TrainRecord(step=step)
        try:
            if mode == "bc":
                idx = buffer.sample_uniform(batch_size, rng)
                batch = buffer.batch(idx)
                record.actor_loss = agent.bc_update(batch.s, batch.a)
            else:
                critic_idx = buffer.sample_uniform(batch_size, rng)
                critic_batch = buffer.batch(critic_idx)
                record.critic_loss = agent.critic_update(critic_batch, rng)
                critic_adv = agent.advantage(critic_batch.s, critic_batch.a, rng)
                buffer.update_priorities(critic_idx, critic_adv)

                actor_idx = buffer.sample_prioritized(batch_size, rng)
                actor_batch = buffer.batch(actor_idx)
                adv = agent.advantage(actor_batch.s, actor_batch.a, rng)
                weights = agent.filter_weights(actor_batch, adv, rng, step=step, total_steps=steps)
                record.approval_fraction = float(np.mean(weights > 1e-8))
                record.adv_mean = float(adv.mean())
                record.adv_std = float(adv.std())
                record.adv_negative_fraction = float(np.mean(adv < 0.0))
                record.actor_loss = agent.actor_update(actor_batch.s, actor_batch.a, weights)
                post_adv = agent.advantage(actor_batch.s, actor_batch.a, rng)
                buffer.update_priorities(actor_idx, post_adv)
        except NumericalError as exc:
            raise NumericalError(f"training aborted at step {step}: {exc}") from exc
        if eval_env is not None and step % eval_interval == 0:
            record.eval_return, record.eval_goal_rate = evaluate_policy(
                agent.actor, eval_env, rng, eval_episodes
            )
            if histogram_probe is not None and mode != "bc":
                from .evalkit import advantage_histogram

                counts, edges, _ = advantage_histogram(agent, histogram_probe, rng)
                record.adv_hist_counts = [int(c) for c in counts]
                record.adv_hist_edges = [float(e) for e in edges]
        if step % log_interval == 0 or not np.isnan(record.eval_return):
            log.records.append(record)
            if log_sink is not None:
                log_sink(record)
    return log
