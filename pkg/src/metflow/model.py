"""Bundle of the structural pieces that define a variational MetFlow family."""

from dataclasses import dataclass
from typing import Any, Optional


@dataclass(frozen=True)
class MetFlowModel:
    """Everything except the trainable values, which live in a ParamTree.

    Attributes:
        target: the TargetModel being approximated.
        prior: PriorModel for the starting distribution.
        stack: FlowStack of proposal maps, or ``None`` for zero steps.
        nu: DirectionDist over ±1 per step.
        family: RatioFamily used for acceptance.
        r: InferenceFn over accept bits.
        setting: noise setting name: ``"deterministic"``, ``"pseudo"`` or
            ``"full"``.
    """

    target: Any
    prior: Any
    stack: Optional[Any]
    nu: Any
    family: Any
    r: Any
    setting: str = "deterministic"

    @property
    def n_steps(self):
        return 0 if self.stack is None else self.stack.n_steps

    @property
    def dim(self):
        return self.prior.dim

    def param_shapes(self):
        shapes = dict(self.prior.param_shapes())
        if self.stack is not None:
            shapes.update(self.stack.param_shapes())
        shapes.update(self.nu.param_shapes())
        shapes.update(self.r.param_shapes())
        return shapes
