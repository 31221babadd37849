"""Tanh-squashed diagonal Gaussian policy head.

The trunk MLP emits (mean, log_std) per action dimension. Log-probabilities
of dataset actions are computed with protective clamping so they stay finite
even at the [-1, 1] action boundary.
"""

import numpy as np

from .errors import ConfigError, DataError, NumericalError
from .numkit import MlpNet

LOG_STD_MIN = -10.0
LOG_STD_MAX = 2.0
SQUASH_EPS = 1e-6        # delta inside log(1 - tanh(u)^2 + delta)
ACTION_CLAMP = 1e-6      # dataset actions clamped into (-1 + delta_a, 1 - delta_a)
LOG_PROB_CLIP = 1000.0   # protective clipping of unstable log probs
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


class SquashedGaussianPolicy:
    def __init__(self, state_dim, action_dim, hidden=(64, 64), rng=None):
        if state_dim <= 0 or action_dim <= 0:
            raise ConfigError("state_dim and action_dim must be positive")
        self.state_dim = int(state_dim)
        self.action_dim = int(action_dim)
        self.trunk = MlpNet([state_dim, *hidden, 2 * action_dim], rng=rng)

    def dist_params(self, states):
        """Trunk forward pass -> (mean, log_std clamped, clamp mask).

        The mask is 1 where the raw log_std was inside the clamp range (used
        to zero gradients through the hard clamp).
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        out = self.trunk.forward(states)
        if not np.isfinite(out).all():
            raise NumericalError("non-finite policy trunk output")
        mean = out[:, : self.action_dim]
        raw_log_std = out[:, self.action_dim :]
        log_std = np.clip(raw_log_std, LOG_STD_MIN, LOG_STD_MAX)
        in_range = (raw_log_std > LOG_STD_MIN) & (raw_log_std < LOG_STD_MAX)
        return mean, log_std, in_range

    def sample_action(self, state, rng):
        """Draws a ~ tanh(N(mean, std^2)) and returns (action, log_prob)."""
        single = np.asarray(state).ndim == 1
        mean, log_std, _ = self.dist_params(state)
        std = np.exp(log_std)
        u = mean + std * rng.standard_normal(mean.shape)
        action = np.tanh(u)
        log_prob = self._log_prob_of_u(u, mean, log_std, action)
        if single:
            return action[0], float(log_prob[0])
        return action, log_prob

    def sample_actions_batch(self, states, k, rng):
        """k squashed samples per state; returns (k, n, action_dim)."""
        mean, log_std, _ = self.dist_params(states)
        std = np.exp(log_std)
        noise = rng.standard_normal((k,) + mean.shape)
        return np.tanh(mean[None] + std[None] * noise)

    def mean_action(self, state):
        single = np.asarray(state).ndim == 1
        mean, _, _ = self.dist_params(state)
        action = np.tanh(mean)
        return action[0] if single else action

    def log_prob(self, state, foreign_action):
        """Log-probability of a dataset action under the current policy."""
        single = np.asarray(foreign_action).ndim == 1
        states = np.atleast_2d(np.asarray(state, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(foreign_action, dtype=np.float64))
        mean, log_std, _ = self.dist_params(states)
        lp, _, _ = self._foreign_log_prob(actions, mean, log_std)
        return float(lp[0]) if single else lp

    def weighted_nll_grad(self, states, actions, weights):
        """Mean weighted negative log-likelihood and its trunk-parameter grads.

        loss = (1/N) * sum_i w_i * (-log pi(a_i | s_i)). Gradients flow only
        through (mean, log_std); the atanh'd action is data, not a function of
        the parameters. Returns (loss, GradTape).
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        actions = np.atleast_2d(np.asarray(actions, dtype=np.float64))
        weights = np.asarray(weights, dtype=np.float64).ravel()
        n = states.shape[0]
        mean, log_std, std_mask = self.dist_params(states)
        log_prob, u, clip_mask = self._foreign_log_prob(actions, mean, log_std)
        var = np.exp(2.0 * log_std)
        z = u - mean
        # d(-logp)/dmean and d(-logp)/dlog_std per dimension
        d_mean = -z / var
        d_log_std = 1.0 - np.square(z) / var
        scale = (weights * clip_mask)[:, None] / n
        grad_out = np.concatenate([d_mean * scale, d_log_std * scale * std_mask], axis=1)
        tape, _ = self.trunk.backward(grad_out)
        loss = float(np.mean(weights * (-log_prob)))
        return loss, tape

    def _foreign_log_prob(self, actions, mean, log_std):
        if actions.shape[1] != self.action_dim:
            raise ConfigError(f"action width {actions.shape[1]} != action_dim {self.action_dim}")
        if np.any(np.abs(actions) > 1.0 + 1e-6):
            raise DataError("foreign action outside [-1, 1]")
        clamped = np.clip(actions, -1.0 + ACTION_CLAMP, 1.0 - ACTION_CLAMP)
        u = np.arctanh(clamped)
        log_prob = self._log_prob_of_u(u, mean, log_std, clamped)
        clipped = np.clip(log_prob, -LOG_PROB_CLIP, LOG_PROB_CLIP)
        # gradient is suppressed where protective clipping was active
        mask = (np.abs(log_prob) < LOG_PROB_CLIP).astype(np.float64)
        return clipped, u, mask

    @staticmethod
    def _log_prob_of_u(u, mean, log_std, action):
        std = np.exp(log_std)
        gauss = -0.5 * np.square((u - mean) / std) - log_std - _HALF_LOG_2PI
        correction = np.log(1.0 - np.square(action) + SQUASH_EPS)
        return (gauss - correction).sum(axis=1)
