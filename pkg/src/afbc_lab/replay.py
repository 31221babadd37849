"""Experience replay over a fixed offline dataset.

Uniform sampling feeds the critic update; advantage-proportional sampling
(through a prefix-sum tree) feeds the actor update. There are deliberately no
importance-sampling weights anywhere in the sampling path: batches carry
transitions and indices only.
"""

from dataclasses import dataclass

import numpy as np

from .errors import UsageError

EPS_PRIORITY = 1e-3


@dataclass
class PrioritySchemeConfig:
    scheme: str = "clipped_advantage"  # or "binary"
    epsilon: float = EPS_PRIORITY

    def __post_init__(self):
        if self.scheme not in ("clipped_advantage", "binary"):
            raise UsageError(f"unknown priority scheme {self.scheme!r}")
        if self.epsilon <= 0:
            raise UsageError("priority epsilon must be positive")

    def raw_priority(self, advantages):
        advantages = np.asarray(advantages, dtype=np.float64)
        if self.scheme == "clipped_advantage":
            return np.maximum(advantages, self.epsilon)
        return (advantages >= 0.0).astype(np.float64) + self.epsilon


class PriorityTree:
    """Prefix-sum tree over exponentiated priorities.

    Capacity is padded to the next power of two; padding leaves hold zero
    priority and are never sampled. Leaf ``i`` stores
    max(raw_priority, eps)^alpha.
    """

    def __init__(self, size, alpha, eps_priority=EPS_PRIORITY):
        if size <= 0:
            raise UsageError("tree needs at least one element")
        if not 0.0 <= alpha <= 1.0:
            raise UsageError("alpha must be in [0, 1]")
        self.size = int(size)
        self.alpha = float(alpha)
        self.eps_priority = float(eps_priority)
        self.capacity = 1
        while self.capacity < self.size:
            self.capacity *= 2
        self.nodes = np.zeros(2 * self.capacity, dtype=np.float64)

    @property
    def total(self):
        return float(self.nodes[1])

    def leaf(self, index):
        return float(self.nodes[self.capacity + index])

    def set_priority(self, index, raw_priority):
        if not 0 <= index < self.size:
            raise UsageError(f"index {index} out of range [0, {self.size})")
        if raw_priority < 0:
            raise UsageError("priority must be non-negative")
        value = max(float(raw_priority), self.eps_priority) ** self.alpha
        node = self.capacity + index
        delta = value - self.nodes[node]
        while node >= 1:
            self.nodes[node] += delta
            node //= 2

    def fill(self, raw_priority):
        for i in range(self.size):
            self.set_priority(i, raw_priority)

    def sample_prefix(self, u):
        """Returns the leaf whose cumulative-priority interval contains u."""
        if self.total <= 0.0:
            raise UsageError("cannot sample from an empty tree")
        node = 1
        while node < self.capacity:
            left = 2 * node
            if u < self.nodes[left]:
                node = left
            else:
                u -= self.nodes[left]
                node = left + 1
        index = node - self.capacity
        # guard against u == total landing on a zero padding leaf
        return min(index, self.size - 1)

    def sample_prefix_batch(self, us):
        """Vectorized sample_prefix: one level-wise descent for many u values.

        Performs the same arithmetic as the scalar version, so the two agree
        exactly for identical inputs.
        """
        if self.total <= 0.0:
            raise UsageError("cannot sample from an empty tree")
        us = np.array(us, dtype=np.float64)
        nodes = np.ones(len(us), dtype=np.int64)
        while nodes[0] < self.capacity:
            left = 2 * nodes
            left_sums = self.nodes[left]
            go_left = us < left_sums
            us = np.where(go_left, us, us - left_sums)
            nodes = np.where(go_left, left, left + 1)
        return np.minimum(nodes - self.capacity, self.size - 1)


class ReplayBuffer:
    """Fixed offline buffer: a TransitionSet plus a priority tree.

    Priorities cold-start at 1 so the first critic epochs visit everything
    before any advantage exists.
    """

    def __init__(self, data, alpha=0.6, scheme=None, eps_priority=EPS_PRIORITY):
        if len(data) == 0:
            raise UsageError("replay buffer needs a non-empty dataset")
        self.data = data
        self.scheme = scheme or PrioritySchemeConfig()
        self.tree = PriorityTree(len(data), alpha=alpha, eps_priority=eps_priority)
        self.tree.fill(1.0)
        self.nan_advantage_skips = 0
        self.zero_total_fallbacks = 0

    def __len__(self):
        return len(self.data)

    def sample_uniform(self, batch_size, rng):
        if batch_size <= 0:
            raise UsageError("batch_size must be positive")
        return rng.integers(0, len(self.data), size=batch_size)

    def sample_prioritized(self, batch_size, rng):
        """Stratified proportional sampling: slot i draws its u uniformly from
        the i-th equal sub-interval of the total priority mass.
        """
        if batch_size <= 0:
            raise UsageError("batch_size must be positive")
        total = self.tree.total
        if total <= 0.0:
            self.zero_total_fallbacks += 1
            return self.sample_uniform(batch_size, rng)
        bounds = np.linspace(0.0, total, batch_size + 1)
        us = rng.uniform(bounds[:-1], bounds[1:])
        return self.tree.sample_prefix_batch(us)

    def update_priorities(self, indices, advantages):
        advantages = np.asarray(advantages, dtype=np.float64)
        finite = np.isfinite(advantages)
        self.nan_advantage_skips += int((~finite).sum())
        raw = self.scheme.raw_priority(advantages)
        for idx, raw_p, ok in zip(np.asarray(indices), raw, finite):
            if ok:
                self.tree.set_priority(int(idx), float(raw_p))

    def batch(self, indices):
        return self.data.subset(np.asarray(indices))
