"""Offline dataset factory.

Collection records scripted policies of graded quality in blocks of episodes,
tags each block with its average undiscounted return, and bins blocks into
five equal-width performance tiers over the environment's return range. The
nine composition recipes then mix tier data at fixed proportions; the
mountain-car factory builds the expert / 9:1 random / 9:1 adversarial sets.

On disk a dataset is a raw little-endian binary file of columns
(s, a, r, s_next, done, tag[, rtg]) plus a JSON manifest sidecar carrying
shapes, per-tag counts, and an FNV-1a checksum of the payload.
"""

import json
import os
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from . import envlab
from .errors import (
    ChecksumError,
    CompositionError,
    DataError,
    DatasetIOError,
    TruncatedFileError,
    UsageError,
    VersionError,
)

FORMAT_VERSION = 1
TIER_NAMES = ("VeryBad", "Bad", "Okay", "Good", "Expert")
UNTAGGED = 255

Transition = namedtuple("Transition", ["s", "a", "r", "s_next", "done"])


@dataclass
class TransitionSet:
    """Columnar storage for a batch of transitions.

    ``tag`` is a small-int label whose meaning the manifest defines (tier
    index for tiered data, source group for mountain-car sets). ``rtg`` holds
    per-transition discounted return-to-go when the set was recorded from
    whole episodes.
    """

    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s_next: np.ndarray
    done: np.ndarray
    tag: np.ndarray = None
    rtg: np.ndarray = None

    def __post_init__(self):
        n = len(self.r)
        if self.tag is None:
            self.tag = np.full(n, UNTAGGED, dtype=np.uint8)
        if not np.isfinite(self.r).all():
            raise DataError("non-finite reward in transition set")

    def __len__(self):
        return len(self.r)

    def __getitem__(self, i):
        return Transition(self.s[i], self.a[i], float(self.r[i]), self.s_next[i], bool(self.done[i]))

    def subset(self, idx):
        return TransitionSet(
            s=self.s[idx],
            a=self.a[idx],
            r=self.r[idx],
            s_next=self.s_next[idx],
            done=self.done[idx],
            tag=self.tag[idx],
            rtg=None if self.rtg is None else self.rtg[idx],
        )

    @staticmethod
    def concat(sets):
        sets = [t for t in sets if len(t) > 0]
        if not sets:
            raise UsageError("cannot concatenate zero transitions")
        rtg = None
        if all(t.rtg is not None for t in sets):
            rtg = np.concatenate([t.rtg for t in sets])
        return TransitionSet(
            s=np.concatenate([t.s for t in sets]),
            a=np.concatenate([t.a for t in sets]),
            r=np.concatenate([t.r for t in sets]),
            s_next=np.concatenate([t.s_next for t in sets]),
            done=np.concatenate([t.done for t in sets]),
            tag=np.concatenate([t.tag for t in sets]),
            rtg=rtg,
        )

    def with_tag(self, tag):
        out = self.subset(slice(None))
        out.tag = np.full(len(self), tag, dtype=np.uint8)
        return out

    def tag_counts(self):
        values, counts = np.unique(self.tag, return_counts=True)
        return {int(v): int(c) for v, c in zip(values, counts)}


@dataclass
class DatasetManifest:
    recipe: str
    env_id: str
    seed: int
    total: int
    state_dim: int
    action_dim: int
    tag_names: dict  # tag value -> human label
    tag_counts: dict  # tag value -> count
    checksum: str = ""
    has_rtg: bool = False
    version: int = FORMAT_VERSION
    extra: dict = field(default_factory=dict)

    def validate(self):
        if sum(self.tag_counts.values()) != self.total:
            raise DataError("manifest tag counts do not sum to total")

    def to_json(self):
        d = dict(self.__dict__)
        d["tag_names"] = {str(k): v for k, v in self.tag_names.items()}
        d["tag_counts"] = {str(k): v for k, v in self.tag_counts.items()}
        return json.dumps(d, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        d["tag_names"] = {int(k): v for k, v in d["tag_names"].items()}
        d["tag_counts"] = {int(k): v for k, v in d["tag_counts"].items()}
        return DatasetManifest(**d)


def fnv1a64(data):
    """64-bit FNV-1a over a bytes payload."""
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def _payload(ds):
    cols = [
        ds.s.astype("<f8").tobytes(),
        ds.a.astype("<f8").tobytes(),
        ds.r.astype("<f8").tobytes(),
        ds.s_next.astype("<f8").tobytes(),
        ds.done.astype("<u1").tobytes(),
        ds.tag.astype("<u1").tobytes(),
    ]
    if ds.rtg is not None:
        cols.append(ds.rtg.astype("<f8").tobytes())
    return b"".join(cols)


def manifest_path(path):
    return str(path) + ".manifest.json"


def save_dataset(ds, manifest, path):
    manifest.total = len(ds)
    manifest.tag_counts = ds.tag_counts()
    manifest.has_rtg = ds.rtg is not None
    manifest.state_dim = ds.s.shape[1]
    manifest.action_dim = ds.a.shape[1]
    payload = _payload(ds)
    manifest.checksum = f"{fnv1a64(payload):016x}"
    manifest.validate()
    with open(path, "wb") as fh:
        fh.write(payload)
    with open(manifest_path(path), "w") as fh:
        fh.write(manifest.to_json())
        fh.write("\n")


def load_dataset(path):
    mpath = manifest_path(path)
    if not os.path.exists(mpath):
        raise DatasetIOError(f"manifest sidecar missing: {mpath}")
    with open(mpath) as fh:
        manifest = DatasetManifest.from_json(fh.read())
    if manifest.version != FORMAT_VERSION:
        raise VersionError(f"dataset format version {manifest.version} unsupported")
    with open(path, "rb") as fh:
        payload = fh.read()
    n, ds_dim, da_dim = manifest.total, manifest.state_dim, manifest.action_dim
    expected = 8 * n * (2 * ds_dim + da_dim + 1) + 2 * n + (8 * n if manifest.has_rtg else 0)
    if len(payload) < expected:
        raise TruncatedFileError(f"dataset payload has {len(payload)} bytes, expected {expected}")
    if f"{fnv1a64(payload):016x}" != manifest.checksum:
        raise ChecksumError(f"checksum mismatch loading {path}")
    off = 0

    def take(count, dtype):
        nonlocal off
        width = np.dtype(dtype).itemsize
        arr = np.frombuffer(payload, dtype=dtype, count=count, offset=off).copy()
        off += count * width
        return arr

    ds = TransitionSet(
        s=take(n * ds_dim, "<f8").reshape(n, ds_dim),
        a=take(n * da_dim, "<f8").reshape(n, da_dim),
        r=take(n, "<f8"),
        s_next=take(n * ds_dim, "<f8").reshape(n, ds_dim),
        done=take(n, "<u1").astype(bool),
        tag=take(n, "<u1"),
        rtg=take(n, "<f8") if manifest.has_rtg else None,
    )
    manifest.validate()
    return ds, manifest


# --- collection -------------------------------------------------------------


def discounted_return_to_go(rewards, gamma):
    out = np.zeros(len(rewards), dtype=np.float64)
    acc = 0.0
    for i in range(len(rewards) - 1, -1, -1):
        acc = rewards[i] + gamma * acc
        out[i] = acc
    return out


def rollout_episodes(env, policy, rng, n_episodes, gamma=0.99, record_full_state=False):
    """Runs ``n_episodes`` and returns (TransitionSet, per-episode returns).

    The done flag stored in transitions marks true termination only; episode
    timeouts are recorded as done=False so the critic still bootstraps.
    ``record_full_state`` additionally returns the env's internal state at
    each step (used for adversarial mining).
    """
    cols = {k: [] for k in ("s", "a", "r", "s_next", "done", "rtg")}
    full_states = []
    returns = []
    for _ in range(n_episodes):
        obs = env.reset(rng)
        ep = {k: [] for k in ("s", "a", "r", "s_next", "done")}
        while True:
            if record_full_state:
                full_states.append(env.full_state)
            action = np.asarray(policy.act(obs, rng), dtype=np.float64)
            next_obs, reward, done = env.step(action)
            ep["s"].append(obs)
            ep["a"].append(action)
            ep["r"].append(reward)
            ep["s_next"].append(next_obs)
            ep["done"].append(env.terminated)
            obs = next_obs
            if done:
                break
        returns.append(float(np.sum(ep["r"])))
        for k in ep:
            cols[k].extend(ep[k])
        cols["rtg"].extend(discounted_return_to_go(np.asarray(ep["r"]), gamma))
    ds = TransitionSet(
        s=np.asarray(cols["s"], dtype=np.float64),
        a=np.asarray(cols["a"], dtype=np.float64),
        r=np.asarray(cols["r"], dtype=np.float64),
        s_next=np.asarray(cols["s_next"], dtype=np.float64),
        done=np.asarray(cols["done"], dtype=bool),
        rtg=np.asarray(cols["rtg"], dtype=np.float64),
    )
    if record_full_state:
        return ds, returns, full_states
    return ds, returns


def tier_index(avg_return, return_range):
    """Equal-width five-bin tier for a block's average return (clipped)."""
    low, high = return_range
    frac = (avg_return - low) / (high - low)
    return int(np.clip(np.floor(frac * len(TIER_NAMES)), 0, len(TIER_NAMES) - 1))


@dataclass
class Block:
    source: str
    avg_return: float
    tier: int
    transitions: TransitionSet


class TierStore:
    """Recording blocks grouped by performance tier."""

    def __init__(self, env_id, return_range):
        self.env_id = env_id
        self.return_range = tuple(return_range)
        self.blocks = []

    def add(self, block):
        self.blocks.append(block)

    def blocks_in_tier(self, tier, exclude_sources=()):
        return [b for b in self.blocks if b.tier == tier and b.source not in exclude_sources]

    def tier_sizes(self):
        sizes = {i: 0 for i in range(len(TIER_NAMES))}
        for b in self.blocks:
            sizes[b.tier] += len(b.transitions)
        return sizes

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        index = {"env_id": self.env_id, "return_range": list(self.return_range), "blocks": []}
        for i, block in enumerate(self.blocks):
            name = f"block_{i:05d}.bin"
            manifest = DatasetManifest(
                recipe="collection-block",
                env_id=self.env_id,
                seed=-1,
                total=len(block.transitions),
                state_dim=block.transitions.s.shape[1],
                action_dim=block.transitions.a.shape[1],
                tag_names={block.tier: TIER_NAMES[block.tier]},
                tag_counts={},
                extra={"source": block.source, "avg_return": block.avg_return, "tier": block.tier},
            )
            save_dataset(block.transitions.with_tag(block.tier), manifest, os.path.join(directory, name))
            index["blocks"].append(name)
        with open(os.path.join(directory, "index.json"), "w") as fh:
            json.dump(index, fh, indent=2)
            fh.write("\n")

    @staticmethod
    def load(directory):
        with open(os.path.join(directory, "index.json")) as fh:
            index = json.load(fh)
        store = TierStore(index["env_id"], tuple(index["return_range"]))
        for name in index["blocks"]:
            ds, manifest = load_dataset(os.path.join(directory, name))
            store.add(
                Block(
                    source=manifest.extra["source"],
                    avg_return=manifest.extra["avg_return"],
                    tier=manifest.extra["tier"],
                    transitions=ds,
                )
            )
        return store


# Scripted pendulum behaviors of graded quality. Each entry is
# (source label, policy factory, number of 10-episode blocks) sized so the
# default store covers every recipe at desk-scale budgets.
PENDULUM_COLLECTION_PLAN = [
    ("controller-n0.00", lambda: envlab.PendulumController(noise=0.0), 5),
    ("controller-n0.20", lambda: envlab.PendulumController(noise=0.20), 5),
    ("controller-n0.45", lambda: envlab.PendulumController(noise=0.45), 4),
    ("controller-n0.50", lambda: envlab.PendulumController(noise=0.50), 4),
    ("controller-n0.65", lambda: envlab.PendulumController(noise=0.65), 4),
    ("controller-n0.70", lambda: envlab.PendulumController(noise=0.70), 3),
    ("controller-n0.90", lambda: envlab.PendulumController(noise=0.90), 26),
    ("spinner-n0.75", lambda: envlab.PendulumSpinner(noise=0.75), 10),
    ("uniform-random", lambda: envlab.UniformRandomPolicy(), 10),
    ("spinner-n0.50", lambda: envlab.PendulumSpinner(noise=0.5), 35),
    ("spinner-n0.00", lambda: envlab.PendulumSpinner(noise=0.0), 33),
]


def collect_snapshots(env_id, rng, episodes_per_block=10, plan=None, gamma=0.99):
    """Records graded scripted policies in blocks and bins them into tiers.

    Blocks whose rollout produced non-finite rewards are discarded. Returns a
    populated TierStore.
    """
    if plan is None:
        if env_id != "pendulum":
            raise UsageError(f"no default collection plan for env {env_id!r}")
        plan = PENDULUM_COLLECTION_PLAN
    env = envlab.make_env(env_id)
    store = TierStore(env_id, env.spec.return_range)
    for source, factory, n_blocks in plan:
        policy = factory()
        for _ in range(n_blocks):
            ds, returns = rollout_episodes(env, policy, rng, episodes_per_block, gamma=gamma)
            if not np.isfinite(ds.r).all():  # pragma: no cover - scripted policies stay finite
                continue
            avg = float(np.mean(returns))
            store.add(Block(source=source, avg_return=avg, tier=tier_index(avg, store.return_range), transitions=ds))
    return store


# --- composition ------------------------------------------------------------

EVEN_SPLIT_RECIPES = {
    "great-expert": (4, 3),          # Expert, Good
    "okay-expert": (4, 3, 2),
    "bad-expert": (4, 3, 2, 1),
    "verybad-expert": (4, 3, 2, 1, 0),
}
# noise:expert ratios for the signal recipes; noise is drawn evenly from the
# two bottom tiers. signal-4 reproduces the extreme 64:1 mixture.
SIGNAL_RATIOS = {"signal-1": 8, "signal-2": 16, "signal-3": 32, "signal-4": 64}
RECIPE_NAMES = tuple(EVEN_SPLIT_RECIPES) + tuple(SIGNAL_RATIOS) + ("stitching",)
DEFAULT_BUDGETS = {**{name: 30_000 for name in EVEN_SPLIT_RECIPES}, **{name: 130_000 for name in SIGNAL_RATIOS}, "stitching": 130_000}


def recipe_tier_counts(recipe, budget):
    """Per-tier sample counts for a recipe at a total budget."""
    if recipe in EVEN_SPLIT_RECIPES:
        tiers = EVEN_SPLIT_RECIPES[recipe]
        base, rem = divmod(budget, len(tiers))
        return {t: base + (1 if i < rem else 0) for i, t in enumerate(tiers)}
    if recipe in SIGNAL_RATIOS:
        ratio = SIGNAL_RATIOS[recipe]
        expert = budget // (1 + ratio)
        noise = budget - expert
        return {4: expert, 1: noise // 2, 0: noise - noise // 2}
    if recipe == "stitching":
        return {0: budget}
    raise UsageError(f"unknown recipe {recipe!r}; known: {RECIPE_NAMES}")


def compose(recipe, store, budget, rng, seed=-1):
    """Draws tier samples without replacement per the recipe proportions."""
    if budget < 0:
        raise UsageError("budget must be non-negative")
    counts = recipe_tier_counts(recipe, budget)
    exclude = ("uniform-random",) if recipe == "stitching" else ()
    deficits = {}
    pools = {}
    for tier, want in counts.items():
        blocks = store.blocks_in_tier(tier, exclude_sources=exclude)
        have = sum(len(b.transitions) for b in blocks)
        if have < want:
            deficits[TIER_NAMES[tier]] = want - have
        pools[tier] = blocks
    if deficits:
        raise CompositionError(f"insufficient tier data for recipe {recipe!r}: {deficits}", deficits)
    parts = []
    for tier in sorted(counts):
        want = counts[tier]
        if want == 0:
            continue
        pool = TransitionSet.concat([b.transitions for b in pools[tier]]).with_tag(tier)
        idx = rng.choice(len(pool), size=want, replace=False)
        parts.append(pool.subset(np.sort(idx)))
    if parts:
        ds = TransitionSet.concat(parts)
    else:
        env = envlab.make_env(store.env_id)
        dim_s, dim_a = env.spec.state_dim, env.spec.action_dim
        ds = TransitionSet(
            s=np.zeros((0, dim_s)),
            a=np.zeros((0, dim_a)),
            r=np.zeros(0),
            s_next=np.zeros((0, dim_s)),
            done=np.zeros(0, dtype=bool),
        )
    manifest = DatasetManifest(
        recipe=recipe,
        env_id=store.env_id,
        seed=seed,
        total=len(ds),
        state_dim=ds.s.shape[1],
        action_dim=ds.a.shape[1],
        tag_names={t: TIER_NAMES[t] for t in counts},
        tag_counts=ds.tag_counts(),
        extra={"budget": budget, "recipe_counts": {TIER_NAMES[t]: c for t, c in counts.items()}},
    )
    return ds, manifest


# --- mountain-car expert / random / adversarial sets ------------------------

MC_TAGS = {0: "expert", 1: "random", 2: "adversarial"}


def mine_adversarial(env, rng, count, max_steps=2_000_000):
    """Runs random rollouts and keeps transitions matching the worst-case
    predicate. Raises with mining statistics if the budget runs out.
    """
    cols = {k: [] for k in ("s", "a", "r", "s_next", "done")}
    kept = 0
    steps = 0
    policy = envlab.UniformRandomPolicy()
    obs = env.reset(rng)
    while kept < count:
        if steps >= max_steps:
            raise DataError(
                f"adversarial mining exhausted: kept {kept}/{count} after {steps} random steps"
            )
        position, velocity = env.full_state
        action = policy.act(obs, rng)
        next_obs, reward, done = env.step(action)
        if env.worst_case_label(position, velocity, action):
            cols["s"].append(obs)
            cols["a"].append(action)
            cols["r"].append(reward)
            cols["s_next"].append(next_obs)
            cols["done"].append(env.terminated)
            kept += 1
        obs = env.reset(rng) if done else next_obs
        steps += 1
    return TransitionSet(
        s=np.asarray(cols["s"]),
        a=np.asarray(cols["a"]),
        r=np.asarray(cols["r"]),
        s_next=np.asarray(cols["s_next"]),
        done=np.asarray(cols["done"], dtype=bool),
    )


def build_mountain_car_sets(rng, total=30_000, expert_fraction=0.1, expert_policy=None, seed=-1):
    """Builds the three mountain-car datasets: pure expert, 9:1 random:expert,
    and 9:1 adversarial:expert. Returns {name: (TransitionSet, manifest)}.
    """
    env = envlab.make_env("mountain-car-1d")
    expert_policy = expert_policy or envlab.MountainCarBangBang()
    n_expert = int(round(total * expert_fraction))
    n_noise = total - n_expert

    def collect_steps(policy, n_steps):
        parts = []
        got = 0
        while got < n_steps:
            ds, _ = rollout_episodes(env, policy, rng, 10)
            parts.append(ds)
            got += len(ds)
        full = TransitionSet.concat(parts)
        return full.subset(slice(0, n_steps))

    expert_pure = collect_steps(expert_policy, total).with_tag(0)
    expert_slice = collect_steps(expert_policy, n_expert).with_tag(0)
    random_part = collect_steps(envlab.UniformRandomPolicy(), n_noise).with_tag(1)
    adversarial_part = mine_adversarial(env, rng, n_noise).with_tag(2)

    def pack(name, ds):
        manifest = DatasetManifest(
            recipe=name,
            env_id="mountain-car-1d",
            seed=seed,
            total=len(ds),
            state_dim=ds.s.shape[1],
            action_dim=ds.a.shape[1],
            tag_names=dict(MC_TAGS),
            tag_counts=ds.tag_counts(),
        )
        return ds, manifest

    return {
        "mc-expert": pack("mc-expert", expert_pure),
        "mc-random-9to1": pack("mc-random-9to1", TransitionSet.concat([random_part, expert_slice])),
        "mc-adversarial-9to1": pack(
            "mc-adversarial-9to1", TransitionSet.concat([adversarial_part, expert_slice])
        ),
    }
