"""Estimator-style front door over the functional training/inference API.

``AttentionTrajectoryPredictor`` follows the scikit-learn conventions:
constructor arguments become hyperparameters readable through
``get_params`` / settable through ``set_params``, ``fit`` learns state into
trailing-underscore attributes, and using the model before fitting raises
``NotFittedError``.  Under the hood everything delegates to the plain
functions in :mod:`airscene.training`, :mod:`airscene.model` and
:mod:`airscene.explain`.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .checkpoint import load_checkpoint, save_checkpoint
from .data import SceneWindow, check_scene, normalize
from .explain import AttentionTimeSeries, attention_timeseries
from .model import ModelConfig, SceneOutput, forward
from .seeding import derive_seed
from .training import TrainConfig, EvalResult, evaluate, predict_scene, train


def validate_scenes(scenes, T: int | None = None, H: int | None = None,
                    expect_raw: bool = True) -> list[SceneWindow]:
    """Check a scene collection and return it as a list."""
    scenes = list(scenes)
    if not scenes:
        raise ValueError("expected at least one scene")
    for i, scene in enumerate(scenes):
        if not isinstance(scene, SceneWindow):
            raise TypeError(
                f"scenes[{i}] is {type(scene).__name__}, expected SceneWindow"
            )
        check_scene(scene, T=T, H=H)
        if expect_raw and scene.normalized:
            raise ValueError(f"scenes[{i}] is normalized; pass raw scenes")
    return scenes


class AttentionTrajectoryPredictor(BaseEstimator):
    """Multi-aircraft trajectory predictor with inspectable attention.

    Parameters mirror the model and training configs; ``fit`` expects raw
    (kilometer) scenes and handles normalization internally.
    """

    def __init__(
        self,
        d_model: int = 64,
        n_heads: int = 4,
        n_variate_layers: int = 2,
        n_aircraft_layers: int = 2,
        ffn_hidden: int = 128,
        mlp_hidden: int = 128,
        T: int = 24,
        H: int = 12,
        lr: float = 1e-3,
        batch_size: int = 8,
        max_epochs: int = 100,
        patience: int = 10,
        clip_norm: float = 1.0,
        loss_mode: str = "supervised",
        lr_schedule: str = "cosine",
        val_fraction: float = 0.2,
        seed: int = 0,
    ):
        self.d_model = d_model
        self.n_heads = n_heads
        self.n_variate_layers = n_variate_layers
        self.n_aircraft_layers = n_aircraft_layers
        self.ffn_hidden = ffn_hidden
        self.mlp_hidden = mlp_hidden
        self.T = T
        self.H = H
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.clip_norm = clip_norm
        self.loss_mode = loss_mode
        self.lr_schedule = lr_schedule
        self.val_fraction = val_fraction
        self.seed = seed

    # ------------------------------------------------------------------
    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            d_model=self.d_model, n_heads=self.n_heads,
            n_variate_layers=self.n_variate_layers,
            n_aircraft_layers=self.n_aircraft_layers,
            ffn_hidden=self.ffn_hidden, mlp_hidden=self.mlp_hidden,
            T=self.T, H=self.H,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            seed=self.seed, lr=self.lr, batch_size=self.batch_size,
            max_epochs=self.max_epochs, patience=self.patience,
            clip_norm=self.clip_norm, loss_mode=self.loss_mode,
            lr_schedule=self.lr_schedule,
        )

    def _check_fitted(self) -> None:
        if not hasattr(self, "params_"):
            raise NotFittedError(
                "this AttentionTrajectoryPredictor is not fitted yet; "
                "call fit() or load() first"
            )

    # ------------------------------------------------------------------
    def fit(self, scenes: Sequence[SceneWindow],
            val_scenes: Sequence[SceneWindow] | None = None):
        """Train on raw scenes; returns self.

        Without an explicit validation split, ``val_fraction`` of the
        scenes (seed-shuffled, at least one) is held out.
        """
        scenes = validate_scenes(scenes, T=self.T, H=self.H)
        if val_scenes is None:
            if not 0.0 < self.val_fraction < 1.0:
                raise ValueError("val_fraction must be in (0, 1)")
            if len(scenes) < 2:
                raise ValueError("need at least 2 scenes to split off validation")
            rng = np.random.default_rng(derive_seed(self.seed, "val-split"))
            order = rng.permutation(len(scenes))
            n_val = max(1, int(round(self.val_fraction * len(scenes))))
            n_val = min(n_val, len(scenes) - 1)
            val_idx = set(order[:n_val].tolist())
            train_split = [s for i, s in enumerate(scenes) if i not in val_idx]
            val_split = [s for i, s in enumerate(scenes) if i in val_idx]
        else:
            train_split = scenes
            val_split = validate_scenes(val_scenes, T=self.T, H=self.H)

        result = train(train_split, val_split, self._model_config(), self._train_config())
        self.params_ = result.params
        self.stats_ = result.stats
        self.metrics_ = result.metrics
        self.best_epoch_ = result.best_epoch
        self.model_config_ = self._model_config()
        return self

    def predict(self, scenes: Sequence[SceneWindow]) -> list[np.ndarray]:
        """Per-scene (N, H, 3) predicted positions in kilometers."""
        self._check_fitted()
        scenes = validate_scenes(scenes, T=self.T, H=self.H)
        return [
            predict_scene(s, self.params_, self.model_config_, self.stats_)
            for s in scenes
        ]

    def evaluate(self, scenes: Sequence[SceneWindow]) -> EvalResult:
        self._check_fitted()
        scenes = validate_scenes(scenes, T=self.T, H=self.H)
        return evaluate(scenes, self.params_, self.model_config_, self.stats_)

    def score(self, scenes: Sequence[SceneWindow], y=None) -> float:
        """Negative ADE in km (higher is better, scikit-learn convention)."""
        return -self.evaluate(scenes).ade

    def attention(self, scene: SceneWindow) -> SceneOutput:
        """Forward one raw scene and return outputs with attention records."""
        self._check_fitted()
        check_scene(scene, T=self.T, H=self.H)
        if scene.normalized:
            raise ValueError("pass a raw scene; normalization is internal")
        return forward(normalize(scene, self.stats_), self.params_, self.model_config_)

    def explain(self, scenes: Sequence[SceneWindow], query_id: str,
                reduction: str = "last-layer-mean") -> AttentionTimeSeries:
        """Attention time series for one aircraft across raw scenes."""
        self._check_fitted()
        scenes = validate_scenes(scenes, T=self.T, H=self.H)
        return attention_timeseries(
            scenes, self.params_, self.model_config_, self.stats_,
            query_id, reduction,
        )

    # ------------------------------------------------------------------
    def save(self, path) -> None:
        self._check_fitted()
        save_checkpoint(path, self.params_, self.model_config_, self.stats_)

    @classmethod
    def load(cls, path) -> "AttentionTrajectoryPredictor":
        """Rebuild a fitted predictor from a checkpoint file."""
        params, model_cfg, stats = load_checkpoint(path)
        est = cls(
            d_model=model_cfg.d_model, n_heads=model_cfg.n_heads,
            n_variate_layers=model_cfg.n_variate_layers,
            n_aircraft_layers=model_cfg.n_aircraft_layers,
            ffn_hidden=model_cfg.ffn_hidden, mlp_hidden=model_cfg.mlp_hidden,
            T=model_cfg.T, H=model_cfg.H,
        )
        est.params_ = params
        est.stats_ = stats
        est.model_config_ = model_cfg
        est.metrics_ = []
        est.best_epoch_ = -1
        return est
