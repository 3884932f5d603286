"""Small hand-built models for analytic oracles."""

import numpy as np

from cfmlab.models import LayerSpec, Model
from cfmlab.tensor import Tensor


def linear_model(rng, shape=(1, 4, 4), num_classes=5, dtype=np.float32) -> Model:
    """f(x) = W flatten(x) + b."""
    n = int(np.prod(shape))
    specs = [LayerSpec("flatten", "flatten"), LayerSpec("fc", "logits", num_classes)]
    w = {
        "logits.weight": Tensor(rng.normal(size=(num_classes, n)), dtype=dtype),
        "logits.bias": Tensor(rng.normal(size=num_classes), dtype=dtype),
    }
    return Model("linear", specs, w, shape, num_classes)
