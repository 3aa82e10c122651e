"""Toy-scale reproduction of the ablation comparisons.

Trains a geometry-then-appearance generator with and without view shuffling
plus a joint single-model variant on procedural scenes, then scores all of
them, the test-time-scaling variant and the hole-filled warp baseline on
held-out scenes.
"""

from dataclasses import asdict, dataclass
import copy
import logging
import time

import numpy as np

from .diffusion import TrainConfig
from .estimator import GTAGenerator, JointGenerator, train_stage
from .evaluation import baseline_report
from .pipeline import build_models, hole_filled_baseline, training_pairs
from .scene import DatasetConfig, generate_samples

log = logging.getLogger(__name__)


@dataclass
class ToyConfig:
    train_scenes: int = 256
    test_scenes: int = 32
    views: int = 9
    resolution: int = 64
    iterations: int = 2000
    batch_size: int = 4
    hidden: int = 32
    steps: int = 64
    lr: float = 1e-3
    lr_decay: str = "cosine"
    sampling: str = "ancestral"
    shuffle_p: float = 0.5
    Q: int = 5
    seed: int = 0
    # Order-aware backbone (learned per-view embedding), standing in for a video prior.
    view_embedding: int = 8


def _estimator(cls, cfg, shuffle_p):
    return cls(
        hidden=cfg.hidden,
        steps=cfg.steps,
        lr=cfg.lr,
        lr_decay=cfg.lr_decay,
        sampling=cfg.sampling,
        batch_size=cfg.batch_size,
        iterations=cfg.iterations,
        shuffle_p=shuffle_p,
        view_embedding=cfg.view_embedding,
        Q=cfg.Q,
        random_state=cfg.seed,
    )


def run_toy_reproduction(cfg=None):
    """Run every variant and return a dict of pooled reports and derived checks."""
    cfg = cfg or ToyConfig()
    t0 = time.perf_counter()
    data = DatasetConfig(scenes=cfg.train_scenes, views=cfg.views, resolution=cfg.resolution,
                         seed=cfg.seed)
    train = generate_samples(data)
    test = generate_samples(
        DatasetConfig(scenes=cfg.test_scenes, views=cfg.views, resolution=cfg.resolution,
                      seed=cfg.seed),
        start=cfg.train_scenes,
    )
    pairs = training_pairs(train)
    log.info("data ready in %.1fs", time.perf_counter() - t0)

    gta = _estimator(GTAGenerator, cfg, cfg.shuffle_p).fit(train, pairs=pairs)
    log.info("shuffle-on GTA trained at %.1fs", time.perf_counter() - t0)

    # Shuffle-off twin: same geometry model, appearance retrained from the same
    # initialization and data stream with the shuffle disabled.
    noshuf = _estimator(GTAGenerator, cfg, 0.0)
    fresh = build_models(4, cfg.hidden, cfg.steps, "cosine", cfg.view_embedding, seed=cfg.seed)
    noshuf.models_ = copy.deepcopy(gta.models_)
    noshuf.models_.appearance = fresh.appearance
    noshuf.loss_curves_ = {"geometry": gta.loss_curves_["geometry"]}
    noshuf.loss_curves_["appearance"] = train_stage(
        noshuf.models_, pairs, "appearance", noshuf._train_config(1)
    )
    log.info("shuffle-off appearance trained at %.1fs", time.perf_counter() - t0)

    joint = _estimator(JointGenerator, cfg, cfg.shuffle_p).fit(train, pairs=pairs)
    log.info("joint model trained at %.1fs", time.perf_counter() - t0)

    single_out = gta.predict(test)
    reports = {
        "baseline": baseline_report(hole_filled_baseline(test), test),
        "gta": gta.evaluate(test, single_out),
        "gta_noshuffle": noshuf.evaluate(test),
        "joint": joint.evaluate(test),
    }
    tts_out = gta.set_params(tts=True).predict(test)
    reports["gta_tts"] = gta.evaluate(test, tts_out)
    gta.set_params(tts=False)
    log.info("evaluation done at %.1fs", time.perf_counter() - t0)

    cov_single = float(np.mean([o.provenance["coverage"][0] for o in single_out]))
    cov_tts = float(np.mean([o.provenance["coverage"][-1] for o in tts_out]))
    agg = {k: r.aggregate for k, r in reports.items()}
    return {
        "config": asdict(cfg),
        "reports": reports,
        "aggregate": agg,
        "coverage_single": cov_single,
        "coverage_tts": cov_tts,
        "loss_curves": {
            "geometry": gta.loss_curves_["geometry"],
            "appearance": gta.loss_curves_["appearance"],
            "appearance_noshuffle": noshuf.loss_curves_["appearance"],
            "joint": joint.loss_curves_["joint"],
        },
        "estimators": {"gta": gta, "gta_noshuffle": noshuf, "joint": joint},
        "seconds": time.perf_counter() - t0,
    }


def summarize(result):
    """key=value lines of the aggregate metrics and coverage figures."""
    lines = []
    for name, agg in result["aggregate"].items():
        for k, v in agg.items():
            lines.append(f"{name}.{k}={v!r}")
    lines.append(f"coverage_single={result['coverage_single']!r}")
    lines.append(f"coverage_tts={result['coverage_tts']!r}")
    lines.append(f"seconds={result['seconds']:.1f}")
    return "\n".join(lines) + "\n"


__all__ = ["ToyConfig", "TrainConfig", "run_toy_reproduction", "summarize"]
