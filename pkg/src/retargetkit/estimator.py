"""Scikit-learn-style front door: fit a retargeting model on source motion
clips, then transform clips into simulated target-body trajectories."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .bilevel import ConstraintBox, RetargetParams, UpdateConfig
from .export import ExportResult, retarget_all
from .morphology import Calibration, CorrespondencePair, Morphology, calibrate
from .objective import LossWeights, RewardConfig, retargeting_reward
from .refmap import SourceMotionClip, precompute_z_nom
from .simcore import SimConfig
from .trainer import PPOConfig, TrainTask, train

__all__ = ["MotionRetargeter"]

_PARAM_NAMES = (
    "source", "target", "pairs", "ppo", "update", "box", "sim", "loss",
    "reward", "seed", "bilevel", "out_dir", "checkpoint_every", "log_every",
)


class MotionRetargeter:
    """Joint optimizer of retargeting parameters and a tracking policy.

    `fit` calibrates the source/target pair, trains the tracking policy and
    the retargeting parameters on the given clips, and stores the fitted
    state. `transform` replays the policy deterministically and returns one
    simulated target trajectory per clip, in the same container format as the
    input motions.
    """

    def __init__(
        self,
        source: Morphology,
        target: Morphology,
        pairs: Sequence[CorrespondencePair],
        ppo: Optional[PPOConfig] = None,
        update: Optional[UpdateConfig] = None,
        box: Optional[ConstraintBox] = None,
        sim: Optional[SimConfig] = None,
        loss: Optional[LossWeights] = None,
        reward: Optional[RewardConfig] = None,
        seed: int = 0,
        bilevel: bool = True,
        out_dir=None,
        checkpoint_every: int = 0,
        log_every: int = 1,
    ):
        self.source = source
        self.target = target
        self.pairs = list(pairs)
        self.ppo = ppo
        self.update = update
        self.box = box
        self.sim = sim
        self.loss = loss
        self.reward = reward
        self.seed = seed
        self.bilevel = bilevel
        self.out_dir = out_dir
        self.checkpoint_every = checkpoint_every
        self.log_every = log_every

    # -- scikit-learn parameter plumbing ------------------------------------

    def get_params(self, deep: bool = False) -> dict:
        return {name: getattr(self, name) for name in _PARAM_NAMES}

    def set_params(self, **kwargs) -> "MotionRetargeter":
        for name, value in kwargs.items():
            if name not in _PARAM_NAMES:
                raise ValueError(
                    f"unknown parameter {name!r}; valid parameters: {_PARAM_NAMES}"
                )
            setattr(self, name, value)
        return self

    def _require_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise RuntimeError(
                "this MotionRetargeter is not fitted yet; call fit first"
            )

    def _effective(self):
        return (
            self.ppo or PPOConfig(),
            self.update or UpdateConfig(),
            self.box or ConstraintBox(),
            self.sim or SimConfig(),
            self.loss or LossWeights(),
            self.reward or retargeting_reward(),
        )

    def _build_task(self, clips: Sequence[SourceMotionClip],
                    cal: Calibration) -> TrainTask:
        z_nom = np.array([
            c.z_nom if c.z_nom is not None
            else precompute_z_nom(c, self.source, cal)
            for c in clips
        ])
        return TrainTask(self.source, self.target, self.pairs, cal,
                         list(clips), z_nom)

    # -- fitting -------------------------------------------------------------

    def fit(self, clips: Sequence[SourceMotionClip],
            resume_from=None) -> "MotionRetargeter":
        if len(clips) == 0:
            raise ValueError("fit requires at least one motion clip")
        ppo, update, box, sim, loss, reward = self._effective()
        self.calibration_ = calibrate(self.source, self.target, self.pairs)
        task = self._build_task(clips, self.calibration_)
        result = train(
            task, ppo, sim, update, box, loss, reward,
            seed=self.seed, bilevel_enabled=self.bilevel,
            out_dir=self.out_dir, checkpoint_every=self.checkpoint_every,
            log_every=self.log_every, resume_from=resume_from,
        )
        self.task_ = task
        self.params_ = result.params
        self.policy_ = result.policy
        self.history_ = result.history
        self.log_path_ = result.log_path
        self.checkpoint_path_ = result.checkpoint_path
        return self

    # -- inference -----------------------------------------------------------

    def export(self, clips: Optional[Sequence[SourceMotionClip]] = None
               ) -> list[ExportResult]:
        """Deterministic rollouts with full per-clip diagnostics.

        With no argument, replays the fitted training clips. New clips reuse
        the fitted per-pair parameters; their per-motion height offsets start
        at zero because those are learned per training motion.
        """
        self._require_fitted()
        ppo, _, _, sim, loss, _ = self._effective()
        if clips is None:
            task, params = self.task_, self.params_
        else:
            task = self._build_task(clips, self.calibration_)
            params = RetargetParams(
                self.params_.pair_names, tuple(c.id for c in clips),
                self.params_.p_pos.copy(), self.params_.p_ori.copy(),
                np.zeros(len(clips)),
            )
        return retarget_all(task, self.policy_, params, sim, ppo, loss)

    def transform(self, clips: Optional[Sequence[SourceMotionClip]] = None
                  ) -> list[SourceMotionClip]:
        """Retargeted target-body trajectories, one clip per input motion."""
        return [r.clip for r in self.export(clips)]

    def fit_transform(self, clips: Sequence[SourceMotionClip]
                      ) -> list[SourceMotionClip]:
        return self.fit(clips).transform()
