"""Reward-guided deformation of an explicit mesh.

The optimisation variable is a per-vertex offset field ``psi`` added to a
fixed base mesh. Each step minimises::

    base_loss(psi) - alpha(step) * reward(base + psi, prompt)

with ``alpha`` ramping linearly over the run. The reward gradient is carried
from the network input back through the patch layout (held fixed within a
step) and the face descriptors to the vertex coordinates.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CapacityError, DegenerateFaceError, ScheduleError
from .features import FeatureTape
from .mesh_core import TriangleMesh
from .mesh_prep import MAX_FACES, assign_patches, build_patch_tensor, gather_face_grad
from .reward_net import RewardParams, backward, forward, text_featurize


@dataclass(frozen=True)
class GuidanceSchedule:
    alpha_start: float = 10.0
    alpha_end: float = 20.0
    total_steps: int = 1

    def __post_init__(self):
        if self.alpha_end < self.alpha_start:
            raise ScheduleError("alpha_end must be >= alpha_start")
        if self.total_steps < 1:
            raise ScheduleError("total_steps must be >= 1")


def alpha_at(schedule: GuidanceSchedule, step: int) -> float:
    if not 0 <= step <= schedule.total_steps:
        raise ScheduleError(f"step {step} outside [0, {schedule.total_steps}]")
    return schedule.alpha_start + (schedule.alpha_end - schedule.alpha_start) * step / schedule.total_steps


def anchor_loss(psi: np.ndarray):
    """``0.5 * |psi|^2`` and its gradient: keeps the shape near the base mesh."""
    return 0.5 * float(np.sum(psi * psi)), np.array(psi, dtype=np.float64)


@dataclass
class GuidanceState:
    vertex_offsets: np.ndarray
    step: int = 0
    reward_trajectory: list = field(default_factory=list)
    loss_trajectory: list = field(default_factory=list)
    alpha_trajectory: list = field(default_factory=list)
    final_reward: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "reward_trajectory": self.reward_trajectory,
            "loss_trajectory": self.loss_trajectory,
            "alpha_trajectory": self.alpha_trajectory,
            "final_reward": self.final_reward,
        }


@dataclass
class CombinedEval:
    loss: float
    grad: np.ndarray
    reward: float
    base_value: float
    assignment: object


def reward_and_vertex_grad(mesh: TriangleMesh, params: RewardParams, text: np.ndarray, assignment=None):
    """Reward of ``mesh`` and its gradient with respect to every vertex.

    Returns ``(reward, grad (V, 3), assignment)``; the assignment is computed
    from ``mesh`` unless given and is a constant for differentiation.
    """
    tape = FeatureTape(mesh)
    if assignment is None:
        assignment = assign_patches(mesh)
    patch = build_patch_tensor(tape.features, assignment)
    r, _, cache = forward(params, patch, text)
    _, d_input = backward(params, cache, 1.0)
    return r, tape.vjp(gather_face_grad(d_input, assignment)), assignment


def combined_loss(base_mesh: TriangleMesh, offsets: np.ndarray, base_loss: Callable, params: RewardParams,
                  prompt, alpha: float, assignment=None) -> CombinedEval:
    """Value and ``psi``-gradient of ``base_loss(psi) - alpha * reward``.

    ``prompt`` is a string or precomputed (16, 128) text tokens. Passing an
    ``assignment`` freezes the patch layout (used by finite-difference checks).
    """
    text = text_featurize(prompt, 0, params.dims) if isinstance(prompt, str) else np.asarray(prompt)
    offsets = np.asarray(offsets, dtype=np.float64)
    b, gb = base_loss(offsets)
    mesh = base_mesh.with_vertices(base_mesh.vertices + offsets)
    r, gr, assignment = reward_and_vertex_grad(mesh, params, text, assignment)
    if alpha == 0.0:
        return CombinedEval(b, np.array(gb, dtype=np.float64), r, b, assignment)
    return CombinedEval(b - alpha * r, gb - alpha * gr, r, b, assignment)


def guide_optimize(base_mesh: TriangleMesh, prompt, params: RewardParams, schedule: GuidanceSchedule,
                   base_loss: Callable = anchor_loss, steps: Optional[int] = None, lr: float = 1e-3,
                   callback=None):
    """Gradient descent on the vertex offsets. Returns ``(final_mesh, state)``.

    Raises
    ------
    DegenerateFaceError
        With a ``step`` attribute when a deformation collapses a face.
    """
    if base_mesh.n_faces > MAX_FACES:
        raise CapacityError(f"base mesh has {base_mesh.n_faces} faces, above {MAX_FACES}; simplify or fuse it first")
    steps = schedule.total_steps if steps is None else steps
    if steps != schedule.total_steps:
        raise ScheduleError(f"steps ({steps}) must equal schedule.total_steps ({schedule.total_steps})")
    text = text_featurize(prompt, 0, params.dims) if isinstance(prompt, str) else np.asarray(prompt)
    state = GuidanceState(vertex_offsets=np.zeros_like(base_mesh.vertices))
    for k in range(steps):
        alpha = alpha_at(schedule, k)
        try:
            ev = combined_loss(base_mesh, state.vertex_offsets, base_loss, params, text, alpha)
        except DegenerateFaceError as exc:
            err = DegenerateFaceError(exc.face, f"step {k}: face {exc.face} became degenerate; reduce the step size")
            err.step = k
            raise err from None
        if callback is not None:
            callback(k, state, ev)
        state.reward_trajectory.append(ev.reward)
        state.loss_trajectory.append(ev.loss)
        state.alpha_trajectory.append(alpha)
        state.vertex_offsets = state.vertex_offsets - lr * ev.grad
        state.step = k + 1
    final = base_mesh.with_vertices(base_mesh.vertices + state.vertex_offsets)
    try:
        state.final_reward = reward_and_vertex_grad(final, params, text)[0]
    except DegenerateFaceError as exc:
        err = DegenerateFaceError(exc.face, f"step {steps}: face {exc.face} became degenerate; reduce the step size")
        err.step = steps
        raise err from None
    return final, state
