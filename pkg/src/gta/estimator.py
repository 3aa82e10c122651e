"""scikit-learn style estimators wrapping training and inference.

``X`` for ``fit`` / ``score`` is a list of :class:`~gta.scene.SceneSample`;
``predict`` also accepts ``(RenderedView, Trajectory)`` pairs.
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .diffusion import TrainConfig, train
from .errors import BadParams, EmptyDataset
from .evaluation import combine_reports, evaluate_run
from .pipeline import (
    build_models,
    infer_batch,
    joint_infer_batch,
    training_pairs,
    tts_batch,
)
from .scene import SceneSample

STAGE_DATA = {
    "geometry": ("geo_target", "geo_cond"),
    "appearance": ("app_target", "app_cond"),
    "joint": ("joint_target", "geo_cond"),
}


def train_stage(models, pairs, stage, cfg, callback=None):
    """Train one component of ``models`` in place; returns the loss curve."""
    if stage not in STAGE_DATA:
        raise BadParams(f"unknown stage {stage!r}")
    net = getattr(models, stage)
    if net is None:
        raise BadParams(f"models have no {stage} component")
    tkey, ckey = STAGE_DATA[stage]
    _, losses = train(net, pairs[tkey], pairs[ckey], cfg, models.schedule, callback)
    return losses


def check_samples(X, need_targets=True):
    X = list(X)
    if not X:
        raise EmptyDataset("no scene samples given")
    for s in X:
        if not isinstance(s, SceneSample):
            raise BadParams(f"expected SceneSample, got {type(s).__name__}")
        if need_targets and len(s.views) != len(s.trajectory):
            raise BadParams("every trajectory pose needs a ground-truth view")
    if len({len(s.trajectory) for s in X}) != 1:
        raise BadParams("all samples must share one trajectory length")
    return X


def _split_inputs(X):
    views, trajs = [], []
    for item in X:
        if isinstance(item, SceneSample):
            views.append(item.input_view)
            trajs.append(item.trajectory)
        else:
            v, tr = item
            views.append(v)
            trajs.append(tr)
    return views, trajs


def scene_seeds(random_state, n):
    return [
        int(np.random.SeedSequence([int(random_state), i]).generate_state(1)[0]) for i in range(n)
    ]


class GTAGenerator(BaseEstimator):
    """Two-stage generator: a geometry denoiser, then an appearance denoiser
    conditioned on the predicted depth.

    Parameters mirror the training and inference knobs; ``shuffle_p`` is the
    view-shuffle probability used while training, ``tts`` switches
    ``predict`` to test-time scaling with window ``Q``.
    """

    _stages = ("geometry", "appearance")

    def __init__(
        self,
        patch=4,
        hidden=32,
        steps=64,
        schedule="cosine",
        lr=1e-3,
        batch_size=4,
        iterations=2000,
        shuffle_p=0.5,
        clip_norm=1.0,
        lr_decay="constant",
        view_embedding=0,
        Q=5,
        max_iters=None,
        tts=False,
        sampling="deterministic",
        predict_batch=32,
        random_state=0,
    ):
        self.patch = patch
        self.hidden = hidden
        self.steps = steps
        self.schedule = schedule
        self.lr = lr
        self.batch_size = batch_size
        self.iterations = iterations
        self.shuffle_p = shuffle_p
        self.clip_norm = clip_norm
        self.lr_decay = lr_decay
        self.view_embedding = view_embedding
        self.Q = Q
        self.max_iters = max_iters
        self.tts = tts
        self.sampling = sampling
        self.predict_batch = predict_batch
        self.random_state = random_state

    def _train_config(self, offset):
        return TrainConfig(
            lr=self.lr,
            batch_size=self.batch_size,
            iterations=self.iterations,
            shuffle_p=self.shuffle_p,
            seed=int(self.random_state) * 100 + offset,
            clip_norm=self.clip_norm,
            lr_decay=self.lr_decay,
        )

    def _init_models(self):
        return build_models(
            self.patch,
            self.hidden,
            self.steps,
            self.schedule,
            self.view_embedding,
            components=self._stages,
            seed=self.random_state,
        )

    def fit(self, X, y=None, stages=None, pairs=None):
        """Train the requested stages (all of them by default) on scene samples.

        Stages not trained keep their current weights when the estimator is
        already fitted, which is how a single stage can be retrained.
        """
        X = check_samples(X)
        if not hasattr(self, "models_"):
            self.models_ = self._init_models()
            self.loss_curves_ = {}
        pairs = pairs if pairs is not None else training_pairs(X, self.patch)
        for k, stage in enumerate(self._stages):
            if stages is not None and stage not in stages:
                continue
            self.loss_curves_[stage] = train_stage(
                self.models_, pairs, stage, self._train_config(k)
            )
        self.n_views_ = len(X[0].trajectory)
        return self

    @classmethod
    def from_models(cls, models, **params):
        est = cls(patch=models.patch, steps=models.schedule.steps, **params)
        est.models_ = models
        est.loss_curves_ = {}
        return est

    def _run(self, views, trajs, seeds):
        if self.tts:
            return tts_batch(views, trajs, self.models_, seeds, self.Q, self.max_iters, self.sampling)
        return infer_batch(views, trajs, self.models_, seeds, self.sampling)

    def predict(self, X):
        """Return one SceneOutput per input scene."""
        check_is_fitted(self, "models_")
        views, trajs = _split_inputs(X)
        seeds = scene_seeds(self.random_state, len(views))
        out = []
        step = max(1, int(self.predict_batch))
        for i in range(0, len(views), step):
            out += self._run(views[i : i + step], trajs[i : i + step], seeds[i : i + step])
        return out

    def evaluate(self, X, outputs=None):
        """Pooled Report over all target views of the samples."""
        X = check_samples(X)
        outputs = self.predict(X) if outputs is None else outputs
        return combine_reports(
            [evaluate_run(o, s.targets) for o, s in zip(outputs, X)], self.get_params()
        )

    def score(self, X, y=None):
        """Mean PSNR (dB) over all target views."""
        return self.evaluate(X).aggregate["psnr"]


class JointGenerator(GTAGenerator):
    """Single denoiser predicting RGB and depth latents together (no geometry stage)."""

    _stages = ("joint",)

    def _run(self, views, trajs, seeds):
        return joint_infer_batch(views, trajs, self.models_, seeds, self.sampling)
