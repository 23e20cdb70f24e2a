"""The seeded desk-scale experiment shared by the acceptance and tracker suites.

Eight simulated training sequences (four varied clean scenes, four fast
oscillating targets under frame-long exposure blur) at 160x120, toy widths,
seed 0.  The loss weight is calibrated once on the untrained fused model and
reused for the frame-only model so the pair differs only in input mode.
Training runs once per test session.
"""

import functools
import time

from fetrack.metrics import evaluate_sequence
from fetrack.model import ModelConfig, TrackerNet
from fetrack.simulator import default_specs, fast_motion_specs, simulate
from fetrack.tracker import track_sequence
from fetrack.training import TrainConfig, calibrate_beta, train

WIDTH, HEIGHT = 160, 120
SEED = 0


def training_set():
    specs = default_specs(4, seed=SEED, width=WIDTH, height=HEIGHT) + fast_motion_specs(4, seed=SEED, width=WIDTH,
                                                                                          height=HEIGHT)
    return [simulate(s).to_sequence() for s in specs]


def held_out_clean():
    return simulate(default_specs(1, seed=99, width=WIDTH, height=HEIGHT)[0]).to_sequence()


def held_out_blurred():
    return simulate(fast_motion_specs(1, seed=99, width=WIDTH, height=HEIGHT)[0]).to_sequence()


def evaluate(model, seq):
    res = track_sequence(model, seq)
    return evaluate_sequence(dict(enumerate(res.boxes)), seq.gt, seq.name).summary()


@functools.cache
def run():
    start = time.perf_counter()
    data = training_set()
    models, losses = {}, {}
    fused = TrackerNet(ModelConfig.toy(input_height=HEIGHT, input_width=WIDTH, seed=SEED))
    config = TrainConfig(epochs=10, steps_per_epoch=20, batch_size=4, seed=SEED)
    config.beta = calibrate_beta(fused, data, config)
    for mode in ("fused", "frame_only"):
        model = fused if mode == "fused" else TrackerNet(
            ModelConfig.toy(input_height=HEIGHT, input_width=WIDTH, seed=SEED, input_mode=mode))
        losses[mode] = [r.L_total for r in train(model, data, config).losses]
        models[mode] = model
    clean, blurred = held_out_clean(), held_out_blurred()
    report = {
        "beta": config.beta,
        "losses": losses,
        "clean": evaluate(models["fused"], clean),
        "blurred": {mode: evaluate(models[mode], blurred) for mode in models},
    }
    report["seconds"] = time.perf_counter() - start
    return models, report
