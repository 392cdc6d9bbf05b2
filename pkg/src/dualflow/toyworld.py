"""Synthetic 2-D manipulation world with scripted experts and demo datasets.

The world is the unit square.  One agent moves by bounded per-step deltas.
Objects within the grasp radius of the agent move with it; an object that
comes within the anchor radius of its task destination latches there
permanently, which is how "release" happens without a gripper channel.

Eight instructions cover four task families, each with a left and a right
variant.  Observations are small two-channel grids rendered by bilinear
splatting, with four perturbation factors (brightness, background clutter,
object spawn shift, vertical plane offset) that define the in-distribution
and out-of-distribution presets.  Factor changes never alter a family's
success criterion, only spawn and rendering conditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "ACTION_BOUND",
    "GRASP_RADIUS",
    "ANCHOR_RADIUS",
    "SUCCESS_RADIUS",
    "STACK_OFFSET",
    "SWEEP_SPACING",
    "DEFAULT_MAX_STEPS",
    "FAMILIES",
    "INSTRUCTION_NAMES",
    "FactorSpec",
    "ID_FACTORS",
    "OOD_FACTORS",
    "sample_broad_factors",
    "TaskInstance",
    "EnvState",
    "Trajectory",
    "Dataset",
    "sample_task",
    "task_instance",
    "init_state",
    "step_env",
    "success",
    "render_obs",
    "expert_action",
    "expert_chunk",
    "expert_controller",
    "rollout",
    "make_dataset",
    "family_instructions",
]

ACTION_BOUND = 0.08
GRASP_RADIUS = 0.045
ANCHOR_RADIUS = 0.03
SUCCESS_RADIUS = 0.05
STACK_OFFSET = 0.03
SWEEP_SPACING = 0.025
DEFAULT_MAX_STEPS = 80
_MARGIN = 0.02
_AGENT_START = (0.5, 0.15)

FAMILIES = ("reach", "transport", "stack", "sweep")
INSTRUCTION_NAMES = (
    "reach_left",
    "reach_right",
    "transport_left",
    "transport_right",
    "stack_left",
    "stack_right",
    "sweep_left",
    "sweep_right",
)

# Nominal geometry per instruction: goal marker and object spawn centers.
# Stack tasks place the moving object (index 0) opposite the static base
# (index 1); the goal is derived from the base's jittered position.
_NOMINAL: dict[str, dict] = {
    "reach_left": {"goal": (0.25, 0.75), "objects": ()},
    "reach_right": {"goal": (0.75, 0.75), "objects": ()},
    "transport_left": {"goal": (0.5, 0.8), "objects": ((0.3, 0.45),)},
    "transport_right": {"goal": (0.5, 0.8), "objects": ((0.7, 0.45),)},
    "stack_left": {"goal": None, "objects": ((0.7, 0.3), (0.35, 0.65))},
    "stack_right": {"goal": None, "objects": ((0.3, 0.3), (0.65, 0.65))},
    "sweep_left": {"goal": (0.15, 0.5), "objects": ((0.45, 0.5), (0.55, 0.5))},
    "sweep_right": {"goal": (0.85, 0.5), "objects": ((0.45, 0.5), (0.55, 0.5))},
}

_OBJECT_WEIGHTS = (1.0, 0.6)


@dataclass(frozen=True)
class FactorSpec:
    """Perturbation factors: lighting, background, spawn offset, plane height."""

    brightness: float = 1.0
    clutter: float = 0.0
    spawn_shift: float = 0.0
    plane_offset: float = 0.0

    def __post_init__(self) -> None:
        if self.brightness <= 0:
            raise ValueError("brightness must be positive")
        if not (0.0 <= self.clutter <= 1.0):
            raise ValueError("clutter density must be in [0, 1]")
        if abs(self.spawn_shift) > 1.0 or abs(self.plane_offset) > 1.0:
            raise ValueError("spawn_shift and plane_offset must be within the unit range")

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.brightness, self.clutter, self.spawn_shift, self.plane_offset)


ID_FACTORS = FactorSpec()
# All four factors shift jointly; brightness drops past the broad-pretrain
# envelope (its lower edge is 0.7) while the other three stay small, so the
# preset stresses feature robustness the adaptation demos cannot teach.
OOD_FACTORS = FactorSpec(brightness=0.6, clutter=0.02, spawn_shift=0.03, plane_offset=0.015)


def sample_broad_factors(rng: np.random.Generator) -> FactorSpec:
    """Wide factor draw used for the pretraining distribution."""
    return FactorSpec(
        brightness=float(rng.uniform(0.7, 1.3)),
        clutter=float(rng.uniform(0.0, 0.06)),
        spawn_shift=float(rng.uniform(-0.08, 0.08)),
        plane_offset=float(rng.uniform(-0.04, 0.04)),
    )


@dataclass
class TaskInstance:
    """One concrete episode setup; fully determined by (instruction, seed, factors)."""

    instruction: int
    name: str
    family: str
    seed: int
    factors: FactorSpec
    agent_start: np.ndarray
    goal: np.ndarray
    objects: np.ndarray
    destinations: np.ndarray
    clutter_seed: int


@dataclass
class EnvState:
    agent: np.ndarray
    objects: np.ndarray
    anchored: np.ndarray

    def copy(self) -> "EnvState":
        return EnvState(self.agent.copy(), self.objects.copy(), self.anchored.copy())


@dataclass
class Trajectory:
    """One rollout: per-step states, query-time observations, executed actions."""

    states: list
    observations: list
    actions: np.ndarray
    success: bool
    steps: int
    instruction: int


def _resolve_instruction(instruction) -> tuple[int, str]:
    if isinstance(instruction, str):
        if instruction not in INSTRUCTION_NAMES:
            raise ValueError(f"unknown task {instruction!r}")
        return INSTRUCTION_NAMES.index(instruction), instruction
    inst = int(instruction)
    if not 0 <= inst < len(INSTRUCTION_NAMES):
        raise ValueError(f"unknown instruction id {instruction!r}")
    return inst, INSTRUCTION_NAMES[inst]


def family_instructions(family: str) -> tuple[int, ...]:
    if family not in FAMILIES:
        raise ValueError(f"unknown family {family!r}")
    return tuple(i for i, name in enumerate(INSTRUCTION_NAMES) if name.split("_")[0] == family)


def _check_inside(name: str, point: np.ndarray) -> None:
    if not ((point >= _MARGIN) & (point <= 1.0 - _MARGIN)).all():
        raise ValueError(f"{name} at {point.round(4).tolist()} falls outside the workspace")


def task_instance(instruction, seed: int, factors: FactorSpec) -> TaskInstance:
    """Deterministic episode setup from (instruction, seed, factors).

    The same seed under different factors draws the same jitters, so factor
    presets shift an instance rather than resampling it.
    """
    inst, name = _resolve_instruction(instruction)
    family = name.split("_")[0]
    rng = np.random.default_rng(seed)
    agent = np.asarray(_AGENT_START) + rng.uniform(-0.03, 0.03, size=2)
    goal_jitter = rng.uniform(-0.02, 0.02, size=2)
    nominal = _NOMINAL[name]
    objects = np.zeros((len(nominal["objects"]), 2))
    for i, center in enumerate(nominal["objects"]):
        objects[i] = np.asarray(center) + rng.uniform(-0.03, 0.03, size=2)
        objects[i, 0] += factors.spawn_shift
    clutter_seed = int(rng.integers(0, 2**32))

    if family == "stack":
        goal = objects[1] + np.array([0.0, STACK_OFFSET])
        destinations = np.stack([goal, objects[1].copy()])
    else:
        goal = np.asarray(nominal["goal"]) + goal_jitter
        if family == "reach":
            destinations = np.zeros((0, 2))
        elif family == "transport":
            destinations = goal[None, :].copy()
        else:  # sweep: the two objects flank the target center
            destinations = np.stack(
                [goal + np.array([0.0, SWEEP_SPACING]), goal - np.array([0.0, SWEEP_SPACING])]
            )

    _check_inside("agent", agent)
    _check_inside("goal", goal)
    for i in range(objects.shape[0]):
        _check_inside(f"object {i}", objects[i])
        _check_inside(f"destination {i}", destinations[i])
    return TaskInstance(
        instruction=inst,
        name=name,
        family=family,
        seed=int(seed),
        factors=factors,
        agent_start=agent,
        goal=goal,
        objects=objects,
        destinations=destinations,
        clutter_seed=clutter_seed,
    )


def sample_task(instruction, factors: FactorSpec, rng: np.random.Generator) -> TaskInstance:
    """Draw an instance seed from rng and build the episode deterministically."""
    seed = int(rng.integers(0, 2**63 - 1))
    return task_instance(instruction, seed, factors)


def init_state(task: TaskInstance) -> EnvState:
    objects = task.objects.copy()
    anchored = np.zeros(objects.shape[0], dtype=bool)
    for i in range(objects.shape[0]):
        if np.linalg.norm(objects[i] - task.destinations[i]) <= ANCHOR_RADIUS:
            anchored[i] = True
    return EnvState(task.agent_start.copy(), objects, anchored)


def step_env(task: TaskInstance, state: EnvState, action) -> EnvState:
    """One environment step: move the agent, carry nearby objects, latch anchors."""
    a = np.asarray(action, dtype=np.float64)
    if a.shape != (2,):
        raise ValueError(f"action must have shape (2,), got {a.shape}")
    if not np.isfinite(a).all():
        raise ValueError("action must be finite")
    delta = np.clip(a, -ACTION_BOUND, ACTION_BOUND)
    agent = np.clip(state.agent + delta, 0.0, 1.0)
    effective = agent - state.agent
    objects = state.objects.copy()
    anchored = state.anchored.copy()
    for i in range(objects.shape[0]):
        if not anchored[i] and np.linalg.norm(objects[i] - state.agent) <= GRASP_RADIUS:
            objects[i] = np.clip(objects[i] + effective, 0.0, 1.0)
    for i in range(objects.shape[0]):
        if not anchored[i] and np.linalg.norm(objects[i] - task.destinations[i]) <= ANCHOR_RADIUS:
            anchored[i] = True
    return EnvState(agent, objects, anchored)


def success(task: TaskInstance, state: EnvState, threshold: float = SUCCESS_RADIUS) -> bool:
    """Family criterion; monotone in threshold by construction."""
    if task.family == "reach":
        return bool(np.linalg.norm(state.agent - task.goal) < threshold)
    dists = np.linalg.norm(state.objects - task.destinations, axis=1)
    return bool((dists < threshold).all())


def render_obs(task: TaskInstance, state: EnvState, grid: int = 16) -> np.ndarray:
    """Two-channel grid: channel 0 agent and goal marker, channel 1 objects
    and clutter.  Brightness scales every value; plane_offset shifts the
    rendered vertical coordinate of all splatted points."""
    if grid < 2:
        raise ValueError("grid must be at least 2")
    f = task.factors
    img = np.zeros((2, grid, grid))

    def splat(ch: int, point: np.ndarray, weight: float) -> None:
        x = min(max(float(point[0]), 0.0), 1.0)
        y = min(max(float(point[1]) + f.plane_offset, 0.0), 1.0)
        gx = x * (grid - 1)
        gy = y * (grid - 1)
        j0 = int(np.floor(gx))
        i0 = int(np.floor(gy))
        fx = gx - j0
        fy = gy - i0
        for ii, wy in ((i0, 1.0 - fy), (i0 + 1, fy)):
            if ii >= grid or wy == 0.0:
                continue
            for jj, wx in ((j0, 1.0 - fx), (j0 + 1, fx)):
                if jj >= grid or wx == 0.0:
                    continue
                img[ch, ii, jj] += weight * wy * wx

    splat(0, state.agent, 1.0)
    splat(0, task.goal, 0.5)
    for i in range(state.objects.shape[0]):
        splat(1, state.objects[i], _OBJECT_WEIGHTS[i])
    if f.clutter > 0.0:
        crng = np.random.default_rng(task.clutter_seed)
        mask = crng.uniform(size=(grid, grid)) < f.clutter
        img[1][mask] += 0.25
    img *= f.brightness
    return img


def _validate_solvable(task: TaskInstance, state: EnvState) -> None:
    pts = np.concatenate([state.agent[None, :], state.objects], axis=0)
    if not np.isfinite(pts).all() or (pts < 0.0).any() or (pts > 1.0).any():
        raise ValueError("expert: state outside the workspace is unsolvable")


def expert_action(task: TaskInstance, state: EnvState) -> np.ndarray:
    """Proportional controller toward the current subgoal, clipped to the bound.

    Subgoal order: approach the first unanchored object, carry it to its
    destination (the anchor latch releases it), repeat; reach tasks steer the
    agent itself.  With nothing left to do the action is zero.
    """
    _validate_solvable(task, state)
    if task.family == "reach":
        vec = task.goal - state.agent
    else:
        pending = [i for i in range(state.objects.shape[0]) if not state.anchored[i]]
        if not pending:
            return np.zeros(2)
        i = pending[0]
        if np.linalg.norm(state.objects[i] - state.agent) > GRASP_RADIUS:
            vec = state.objects[i] - state.agent
        else:
            vec = task.destinations[i] - state.objects[i]
    return np.clip(vec, -ACTION_BOUND, ACTION_BOUND)


def expert_chunk(task: TaskInstance, state: EnvState, horizon: int) -> np.ndarray:
    """The expert's next `horizon` actions, simulated closed-loop from state."""
    sim = state.copy()
    actions = np.zeros((horizon, 2))
    for k in range(horizon):
        actions[k] = expert_action(task, sim)
        sim = step_env(task, sim, actions[k])
    return actions


def expert_controller(horizon: int):
    """Controller adapter for rollout(): ignores the rendered observation."""

    def control(task: TaskInstance, state: EnvState, obs: np.ndarray) -> np.ndarray:
        return expert_chunk(task, state, horizon)

    return control


def rollout(
    controller,
    task: TaskInstance,
    max_steps: int = DEFAULT_MAX_STEPS,
    horizon: int = 8,
    execute: int = 2,
    grid: int = 16,
    threshold: float = SUCCESS_RADIUS,
) -> Trajectory:
    """Chunked control: query an H-step chunk, execute the first E steps, repeat."""
    if not 1 <= execute <= horizon:
        raise ValueError("need 1 <= execute <= horizon")
    if max_steps < 1:
        raise ValueError("max_steps must be >= 1")
    state = init_state(task)
    states = [state]
    observations: list[np.ndarray] = []
    actions: list[np.ndarray] = []
    done = success(task, state, threshold)
    steps = 0
    while not done and steps < max_steps:
        obs = render_obs(task, state, grid)
        try:
            chunk = np.asarray(controller(task, state, obs), dtype=np.float64)
        except Exception as exc:
            raise RuntimeError(f"controller failed at step {steps}") from exc
        if chunk.shape != (horizon, 2):
            raise ValueError(f"controller returned shape {chunk.shape}, expected ({horizon}, 2)")
        observations.append(obs)
        for k in range(execute):
            state = step_env(task, state, chunk[k])
            states.append(state)
            actions.append(chunk[k])
            steps += 1
            if success(task, state, threshold):
                done = True
                break
            if steps >= max_steps:
                break
    acts = np.array(actions).reshape(len(actions), 2)
    return Trajectory(states, observations, acts, done, steps, task.instruction)


@dataclass
class Dataset:
    """Demonstration slices: observation, instruction, state, normalized chunk."""

    obs: np.ndarray
    instr: np.ndarray
    state: np.ndarray
    chunks: np.ndarray
    mean: np.ndarray
    std: np.ndarray
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.chunks.shape[0]

    def normalize(self, actions: np.ndarray) -> np.ndarray:
        return (actions - self.mean) / self.std

    def denormalize(self, actions: np.ndarray) -> np.ndarray:
        return actions * self.std + self.mean

    _ARRAYS = ("obs", "instr", "state", "chunks", "mean", "std")

    def to_bytes(self) -> bytes:
        header = {
            "format": "dualflow-dataset-v1",
            "meta": self.meta,
            "arrays": [
                {
                    "name": name,
                    "shape": list(getattr(self, name).shape),
                    "dtype": str(getattr(self, name).dtype),
                }
                for name in self._ARRAYS
            ],
        }
        parts = [json.dumps(header, sort_keys=True, separators=(",", ":")).encode(), b"\n"]
        for name in self._ARRAYS:
            arr = np.ascontiguousarray(getattr(self, name))
            parts.append(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Dataset":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("format") != "dualflow-dataset-v1":
                raise ValueError(f"not a dataset file: format {header.get('format')!r}")
            fields = {}
            for spec in header["arrays"]:
                dtype = np.dtype(spec["dtype"]).newbyteorder("<")
                count = int(np.prod(spec["shape"], dtype=np.int64)) if spec["shape"] else 1
                raw = fh.read(count * dtype.itemsize)
                if len(raw) != count * dtype.itemsize:
                    raise ValueError("dataset file truncated")
                arr = np.frombuffer(raw, dtype=dtype).reshape(spec["shape"])
                fields[spec["name"]] = arr.astype(arr.dtype.newbyteorder("="))
            if fh.read(1):
                raise ValueError("dataset file has trailing bytes")
        return cls(meta=header["meta"], **fields)


def make_dataset(
    instructions,
    n_demos: int,
    factors,
    rng: np.random.Generator,
    horizon: int = 8,
    grid: int = 16,
    max_steps: int = DEFAULT_MAX_STEPS,
    retries_per_demo: int = 10,
) -> Dataset:
    """Expert demos sliced into (obs, instruction, state, H-chunk) training rows.

    factors is a FactorSpec or a callable rng -> FactorSpec for per-demo
    draws.  Chunks are zero-padded past episode end, then normalized per
    dimension by statistics over every stored entry.
    """
    instructions = list(instructions)
    if not instructions:
        raise ValueError("make_dataset: empty instruction list")
    if n_demos < 1:
        raise ValueError("make_dataset: n_demos must be >= 1")
    obs_rows: list[np.ndarray] = []
    instr_rows: list[int] = []
    state_rows: list[np.ndarray] = []
    chunk_rows: list[np.ndarray] = []
    for instruction in instructions:
        inst, name = _resolve_instruction(instruction)
        for _ in range(n_demos):
            for _attempt in range(retries_per_demo):
                spec = factors(rng) if callable(factors) else factors
                task = sample_task(inst, spec, rng)
                state = init_state(task)
                states = [state]
                acts: list[np.ndarray] = []
                while not success(task, state) and len(acts) < max_steps:
                    a = expert_action(task, state)
                    acts.append(a)
                    state = step_env(task, state, a)
                    states.append(state)
                if success(task, state):
                    break
            else:
                raise RuntimeError(
                    f"expert failed {retries_per_demo} straight instances of {name}"
                )
            padded = np.concatenate([np.array(acts).reshape(len(acts), 2), np.zeros((horizon, 2))])
            for t in range(len(acts)):
                obs_rows.append(render_obs(task, states[t], grid))
                instr_rows.append(inst)
                state_rows.append(states[t].agent.copy())
                chunk_rows.append(padded[t : t + horizon])
    chunks = np.stack(chunk_rows)
    flat = chunks.reshape(-1, chunks.shape[-1])
    mean = flat.mean(axis=0)
    std = np.maximum(flat.std(axis=0), 1e-8)
    return Dataset(
        obs=np.stack(obs_rows),
        instr=np.asarray(instr_rows, dtype=np.int64),
        state=np.stack(state_rows),
        chunks=(chunks - mean) / std,
        mean=mean,
        std=std,
        meta={
            "horizon": horizon,
            "grid": grid,
            "action_dim": 2,
            "instructions": [int(_resolve_instruction(i)[0]) for i in instructions],
            "n_demos": int(n_demos),
        },
    )
