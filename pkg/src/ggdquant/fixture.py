"""Seeded desk-scale reference network and synthetic datasets.

The network is 3 conv + 1 fully connected layer with 10 output classes.
Inputs are noisy mixtures of ten class prototypes, centered so that the
input tensor is double-sided while the post-ReLU feature maps are skewed and
heavy-tailed like real CNN activations. The convolutions are random; the
classifier is a ridge-regression readout fitted on a separate training draw,
which gives a realistic spread of decision margins.
All arrays are rounded to float32 so that files written by ``gen-fixture``
reproduce the in-memory objects exactly.
"""

from __future__ import annotations

import numpy as np

from .netsim import LayerSpec, NetworkModel, forward_float

INPUT_SHAPE = (3, 16, 16)
NUM_CLASSES = 10

# stream offsets keep model, calibration and evaluation draws independent
_MODEL_STREAM = 0
_PROTOTYPE_STREAM = 1
_CALIB_STREAM = 2
_EVAL_STREAM = 3
_TRAIN_STREAM = 4

TRAIN_SIZE = 4000
RIDGE = 0.1
# gamma(1.5, 1) has mean 1.5; subtracting it centers the inputs
_INPUT_OFFSET = 1.5


def _f32(a):
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def _rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, stream])


def reference_model(seed: int = 0) -> NetworkModel:
    rng = _rng(seed, _MODEL_STREAM)

    def conv(name, cin, cout):
        fan_in = cin * 9
        sigma = np.sqrt(2.0 / fan_in) * rng.uniform(0.6, 1.4)
        w = rng.normal(0.0, sigma, size=(cout, cin, 3, 3))
        b = rng.normal(0.0, 0.1 * sigma, size=cout)
        return LayerSpec(name, "conv", _f32(w), _f32(b), stride=1, padding=1)

    layers = [
        conv("conv1", 3, 8),
        LayerSpec("relu1", "relu"),
        LayerSpec("pool1", "maxpool", kernel=2, stride=2),
        conv("conv2", 8, 16),
        LayerSpec("relu2", "relu"),
        LayerSpec("pool2", "maxpool", kernel=2, stride=2),
        conv("conv3", 16, 16),
        LayerSpec("relu3", "relu"),
    ]
    features = NetworkModel(INPUT_SHAPE, layers)
    w, b = _fit_readout(features, seed)
    layers.append(LayerSpec("fc", "fc", _f32(w), _f32(b)))
    layers.append(LayerSpec("prob", "softmax"))
    return NetworkModel(INPUT_SHAPE, layers)


def _fit_readout(features: NetworkModel, seed: int):
    x, labels = _draw(TRAIN_SIZE, seed, _TRAIN_STREAM)
    feats = forward_float(features, x)[-1].reshape(TRAIN_SIZE, -1)
    design = np.hstack([feats, np.ones((TRAIN_SIZE, 1))])
    gram = design.T @ design
    penalty = RIDGE * np.trace(gram) / gram.shape[0]
    coef = np.linalg.solve(gram + penalty * np.eye(gram.shape[0]), design.T @ np.eye(NUM_CLASSES)[labels])
    return coef[:-1].T, coef[-1]


def _prototypes(seed: int) -> np.ndarray:
    rng = _rng(seed, _PROTOTYPE_STREAM)
    return rng.gamma(1.5, 1.0, size=(NUM_CLASSES,) + INPUT_SHAPE)


def _draw(n: int, seed: int, stream: int):
    rng = _rng(seed, stream)
    protos = _prototypes(seed)
    labels = rng.integers(0, NUM_CLASSES, size=n)
    mix = rng.uniform(0.1, 0.5, size=(n, 1, 1, 1))
    noise = rng.gamma(1.5, 1.0, size=(n,) + INPUT_SHAPE)
    return _f32(mix * protos[labels] + (1.0 - mix) * noise - _INPUT_OFFSET), labels


def synthetic_inputs(n: int, seed: int = 0, split: str = "calibration") -> np.ndarray:
    """``n`` inputs of shape ``(3, 16, 16)`` drawn from the prototype mixture."""
    if n < 0:
        raise ValueError(f"input count must be non-negative, got {n}")
    stream = {"calibration": _CALIB_STREAM, "evaluation": _EVAL_STREAM}[split]
    return _draw(n, seed, stream)[0]
