"""Small pixel-observation tasks whose optimal action depends on history.

Both tasks render only positions, never the latent phase variables, so a
policy reading one frame cannot recover the expert action everywhere:

* parity: a bar fills and empties; success is five full fill-empty cycles.
  The rendering shows the level only, so mid-range frames do not reveal
  whether the level is rising or falling.
* pnp: a gripper carries an object from its starting plate to the opposite
  plate and back. The rendering shows positions only, so the start state
  and the finished state look identical, and a mid-carry frame does not
  reveal the trip direction.

Scripted experts read the latent state directly. Policies see pixels.
States are immutable values; step() returns a new state.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

IMAGE_H = 32
IMAGE_W = 32
IMAGE_C = 1
ACTION_DIM = 4
BUDGET = 200
TEXT_VOCAB = 32

TASKS = ("parity", "pnp")
TASK_IDS = {"parity": 1, "pnp": 2}

SPEED = 0.125
PLATE_A = 0.15
PLATE_B = 0.85
HOME = 0.5
CAPTURE = 0.06

DATASET_MAGIC = b"CTXD"
DATASET_VERSION = 1

PARITY_CYCLES_FULL = 5


class DatasetError(ValueError):
    pass


def instruction_ids(task: str, length: int = 8) -> np.ndarray:
    """Constant per-task instruction: [task id, 0, 0, ...]."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    ids = np.zeros(length, dtype=np.int64)
    ids[0] = TASK_IDS[task]
    return ids


# ---------------------------------------------------------------------------
# parity: oscillating bar, success = 5 full cycles.

@dataclass(frozen=True)
class ParityState:
    level: float
    direction: int
    armed: bool
    cycles: int
    steps: int

    task: str = "parity"


@dataclass(frozen=True)
class PnPState:
    gripper: float
    obj: float
    held: bool
    closed: bool
    phase: int
    origin: float
    steps: int

    task: str = "pnp"


def reset(task: str, seed: int):
    if task == "parity":
        return ParityState(level=SPEED * (seed % 4), direction=1,
                           armed=False, cycles=0, steps=0)
    if task == "pnp":
        origin = PLATE_A if seed % 2 == 0 else PLATE_B
        return PnPState(gripper=HOME, obj=origin, held=False, closed=False,
                        phase=0, origin=origin, steps=0)
    raise ValueError(f"unknown task {task!r}")


def _check_action(action) -> np.ndarray:
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (ACTION_DIM,):
        raise ValueError(f"action must have shape ({ACTION_DIM},), got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("action must be finite")
    return np.clip(a, -1.0, 1.0)


def step(state, action):
    a = _check_action(action)
    if isinstance(state, ParityState):
        level = float(np.clip(state.level + SPEED * a[0], 0.0, 1.0))
        armed, cycles = state.armed, state.cycles
        if level >= 1.0 - 1e-9:
            armed = True
        elif armed and level <= 1e-9:
            cycles += 1
            armed = False
        if level >= 1.0 - 1e-9:
            direction = -1
        elif level <= 1e-9:
            direction = 1
        else:
            direction = state.direction
        return replace(state, level=level, direction=direction, armed=armed,
                       cycles=cycles, steps=state.steps + 1)
    if isinstance(state, PnPState):
        g = float(np.clip(state.gripper + SPEED * a[0], 0.0, 1.0))
        held, closed, obj = state.held, state.closed, state.obj
        if a[1] > 0.25 and not closed:
            closed = True
            if abs(g - obj) <= CAPTURE:
                held = True
        elif a[1] < -0.25 and closed:
            closed = False
            held = False
        if held:
            obj = g
        phase = state.phase
        if phase == 0:
            target = PLATE_B if state.origin == PLATE_A else PLATE_A
            if not held and abs(obj - target) <= CAPTURE:
                phase = 1
        elif phase == 1:
            if not held and abs(obj - state.origin) <= CAPTURE:
                phase = 2
        return replace(state, gripper=g, obj=obj, held=held, closed=closed,
                       phase=phase, steps=state.steps + 1)
    raise ValueError(f"not an environment state: {type(state).__name__}")


def partial_success(state) -> bool:
    if isinstance(state, ParityState):
        return state.cycles >= 1
    return state.phase >= 1


def full_success(state) -> bool:
    if isinstance(state, ParityState):
        return state.cycles >= PARITY_CYCLES_FULL
    return state.phase >= 2


# ---------------------------------------------------------------------------
# Experts. They read the latent state; the fractional last move lands
# exactly on the target, so positions stay reproducible.

def _move_toward(src: float, dst: float) -> float:
    return float(np.clip((dst - src) / SPEED, -1.0, 1.0))


def expert_action(state) -> np.ndarray:
    a = np.zeros(ACTION_DIM)
    if isinstance(state, ParityState):
        a[0] = float(state.direction)
        return a
    if isinstance(state, PnPState):
        # All gates sit at the capture radius, not at exact landing, so the
        # demonstrated grip/release rule stays reachable for imprecise
        # controllers.
        if state.phase == 2:
            if abs(state.gripper - HOME) > CAPTURE:
                a[0] = _move_toward(state.gripper, HOME)
            return a
        if state.held:
            target = (PLATE_B if state.origin == PLATE_A else PLATE_A) \
                if state.phase == 0 else state.origin
            if abs(state.gripper - target) > CAPTURE:
                a[0] = _move_toward(state.gripper, target)
            else:
                a[1] = -1.0
            return a
        if abs(state.gripper - state.obj) > CAPTURE:
            a[0] = _move_toward(state.gripper, state.obj)
        elif not state.closed:
            a[1] = 1.0
        else:
            a[1] = -1.0
        return a
    raise ValueError(f"not an environment state: {type(state).__name__}")


# ---------------------------------------------------------------------------
# Rendering. A pure function of the state fields; latent phase variables
# (direction, trip phase, held) have no pixel signature of their own.

def _px(v: float, span: int = IMAGE_W - 1) -> int:
    return int(v * span + 0.5)


def _hspan(img: np.ndarray, rows: slice, c0: int, c1: int, value: int) -> None:
    img[rows, max(c0, 0) : min(c1, IMAGE_W - 1) + 1] = value


def _render_one(state) -> np.ndarray:
    img = np.zeros((IMAGE_H, IMAGE_W), dtype=np.uint8)
    if isinstance(state, ParityState):
        img[30, 10:22] = 120
        filled = int(state.level * 28 + 0.5)
        if filled:
            img[30 - filled : 30, 12:20] = 255
        return img[:, :, None]
    pg = _px(state.gripper)
    po = _px(state.obj)
    for plate in (PLATE_A, PLATE_B):
        _hspan(img, slice(29, 31), _px(plate) - 2, _px(plate) + 2, 90)
    _hspan(img, slice(22, 28), po - 2, po + 2, 255)
    _hspan(img, slice(3, 4), pg - 2, pg + 2, 200)
    if state.closed:
        _hspan(img, slice(4, 12), pg - 1, pg + 1, 200)
    else:
        _hspan(img, slice(4, 12), pg - 2, pg - 2, 200)
        _hspan(img, slice(4, 12), pg + 2, pg + 2, 200)
    return img[:, :, None]


def render(state, views: int = 1) -> np.ndarray:
    """(V, H, W, C) uint8. View 1 is the mirrored camera."""
    if views not in (1, 2):
        raise ValueError("views must be 1 or 2")
    base = _render_one(state)
    if views == 1:
        return base[None]
    return np.stack([base, base[:, ::-1]])


# ---------------------------------------------------------------------------
# Demonstrations.

@dataclass
class Episode:
    instruction: int
    success: bool
    images: np.ndarray  # (T, H, W, C) uint8
    actions: np.ndarray  # (T, A) float32


@dataclass
class Dataset:
    task: str
    episodes: list[Episode]

    @property
    def records(self) -> int:
        return sum(len(e.actions) for e in self.episodes)


def _demo_done(state) -> bool:
    """Expert stops early only on pnp, once parked near home with both
    trips done. The tolerance matches the capture radius so noisy
    executions still terminate."""
    return (isinstance(state, PnPState) and state.phase == 2
            and abs(state.gripper - HOME) <= CAPTURE)


PNP_REST_STEPS = 4


def run_expert_episode(task: str, seed: int, noise_sigma: float = 0.0,
                       budget: int = BUDGET) -> Episode:
    """Roll the scripted expert; returns rendered frames and expert actions.

    noise_sigma perturbs the executed action only; the recorded label stays
    the clean expert action, so demonstrations cover off-policy states while
    the labels remain corrective.

    The parity expert oscillates for the whole budget. The pnp expert rests
    a few steps after finishing; the rest tail is kept shorter than the
    history window so fully static histories occur only at episode start.
    """
    rng = np.random.default_rng(np.random.SeedSequence((seed, 977)))
    state = reset(task, seed)
    images, actions = [], []
    rest = 0
    while state.steps < budget:
        a = expert_action(state)
        taken = a
        if noise_sigma > 0.0:
            taken = np.clip(a + rng.normal(0.0, noise_sigma, ACTION_DIM),
                            -1.0, 1.0)
        images.append(render(state)[0])
        actions.append(a)
        state = step(state, taken)
        if _demo_done(state):
            rest += 1
            if rest > PNP_REST_STEPS:
                break
    return Episode(
        instruction=TASK_IDS[task],
        success=full_success(state),
        images=np.stack(images),
        actions=np.stack(actions).astype(np.float32),
    )


def generate_dataset(path: str, task: str, episodes: int = 50, seed: int = 0,
                     noise_sigma: float = 0.0, budget: int = BUDGET) -> Dataset:
    """Write expert demonstrations plus a JSON sidecar mirroring the header."""
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    eps = [run_expert_episode(task, seed + e, noise_sigma, budget)
           for e in range(episodes)]
    ds = Dataset(task, eps)
    buf = io.BytesIO()
    buf.write(DATASET_MAGIC)
    buf.write(struct.pack("<I", DATASET_VERSION))
    name = task.encode("utf-8")
    buf.write(struct.pack("<H", len(name)))
    buf.write(name)
    buf.write(struct.pack("<I", episodes))
    for ep in eps:
        buf.write(struct.pack("<IIB", len(ep.actions), ep.instruction,
                              int(ep.success)))
        for img, act in zip(ep.images, ep.actions):
            buf.write(img.tobytes())
            buf.write(act.astype("<f4").tobytes())
    data = buf.getvalue()
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(data)
    os.replace(tmp, path)
    manifest = {
        "magic": DATASET_MAGIC.decode(),
        "version": DATASET_VERSION,
        "task": task,
        "episodes": episodes,
        "records": ds.records,
        "image": [IMAGE_H, IMAGE_W, IMAGE_C],
        "action_dim": ACTION_DIM,
    }
    with open(path + ".json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return ds


def load_dataset(path: str) -> Dataset:
    frame_bytes = IMAGE_H * IMAGE_W * IMAGE_C

    def read(f, n):
        b = f.read(n)
        if len(b) != n:
            raise DatasetError("truncated dataset file")
        return b

    with open(path, "rb") as f:
        if read(f, 4) != DATASET_MAGIC:
            raise DatasetError("bad magic")
        (version,) = struct.unpack("<I", read(f, 4))
        if version != DATASET_VERSION:
            raise DatasetError(f"unsupported version {version}")
        (nlen,) = struct.unpack("<H", read(f, 2))
        task = read(f, nlen).decode("utf-8")
        if task not in TASKS:
            raise DatasetError(f"unknown task {task!r} in dataset")
        (count,) = struct.unpack("<I", read(f, 4))
        episodes = []
        for _ in range(count):
            steps, instr, success = struct.unpack("<IIB", read(f, 9))
            if steps == 0:
                raise DatasetError("empty episode")
            images = np.empty((steps, IMAGE_H, IMAGE_W, IMAGE_C), dtype=np.uint8)
            actions = np.empty((steps, ACTION_DIM), dtype=np.float32)
            for t in range(steps):
                images[t] = np.frombuffer(
                    read(f, frame_bytes), dtype=np.uint8
                ).reshape(IMAGE_H, IMAGE_W, IMAGE_C)
                actions[t] = np.frombuffer(read(f, 4 * ACTION_DIM), dtype="<f4")
            episodes.append(Episode(instr, bool(success), images, actions))
        if f.read(1):
            raise DatasetError("trailing bytes after last episode")
    return Dataset(task, episodes)


# ---------------------------------------------------------------------------
# Closed-loop evaluation.

def evaluate_policy(policy, task: str, trials: int = 20, seed: int = 0,
                    budget: int = BUDGET, views: int = 1) -> dict:
    """Roll the policy in the environment; receding horizon (first action
    of each predicted chunk), one frame appended per step.

    The policy protocol: begin_episode(instruction_ids, episode_index),
    act(views) -> (chunk, A) array, observe(views). A policy may expose
    set_state(state) to read the latent state (scripted baselines).
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    instr = instruction_ids(task)
    episodes = []
    for e in range(trials):
        state = reset(task, seed + e)
        policy.begin_episode(instr, e)
        while state.steps < budget:
            obs = render(state, views)
            if hasattr(policy, "set_state"):
                policy.set_state(state)
            chunk = np.asarray(policy.act(obs))
            if chunk.ndim != 2 or chunk.shape[1] != ACTION_DIM:
                raise ValueError(
                    f"policy output must be (chunk, {ACTION_DIM}), got {chunk.shape}"
                )
            policy.observe(obs)
            state = step(state, chunk[0])
            if full_success(state):
                break
        episodes.append({
            "episode": e,
            "steps": state.steps,
            "partial": partial_success(state),
            "full": full_success(state),
        })
    return {
        "task": task,
        "trials": trials,
        "partial_pct": 100.0 * sum(r["partial"] for r in episodes) / trials,
        "full_pct": 100.0 * sum(r["full"] for r in episodes) / trials,
        "episodes": episodes,
    }


class ExpertPolicy:
    """Latent-state oracle wrapped in the policy protocol."""

    def begin_episode(self, instr_ids, episode):
        self.state = None

    def set_state(self, state):
        self.state = state

    def act(self, views):
        return expert_action(self.state)[None]

    def observe(self, views):
        pass


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.seed = seed

    def begin_episode(self, instr_ids, episode):
        self.rng = np.random.default_rng(
            np.random.SeedSequence((self.seed, episode))
        )

    def act(self, views):
        return self.rng.uniform(-1.0, 1.0, (1, ACTION_DIM))

    def observe(self, views):
        pass
