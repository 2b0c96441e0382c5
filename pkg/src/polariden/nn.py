"""Dense networks over :mod:`polariden.autodiff`.

Parameters live in a flat ``{name: ndarray}`` dict so they can be swapped for
tape variables during training and written to checkpoints unchanged.
"""

import numpy as np

from . import autodiff as ad

ACTIVATIONS = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "linear": lambda x: x,
}


class MLP:
    """Fully connected network ``sizes[0] -> ... -> sizes[-1]``.

    ``hidden`` is applied after every layer except the last, which uses
    ``output``.  With ``bias=False`` the layers are pure matrix products.
    """

    def __init__(self, sizes, hidden="relu", output="linear", bias=True, prefix="mlp"):
        self.sizes = tuple(int(s) for s in sizes)
        self.hidden = hidden
        self.output = output
        self.bias = bias
        self.prefix = prefix

    @property
    def n_layers(self):
        return len(self.sizes) - 1

    def param_names(self):
        names = []
        for i in range(self.n_layers):
            names.append(f"{self.prefix}/W{i}")
            if self.bias:
                names.append(f"{self.prefix}/b{i}")
        return names

    def init_params(self, rng, zero_last=False):
        """Glorot-uniform weights and zero biases."""
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            if zero_last and i == self.n_layers - 1:
                w = np.zeros_like(w)
            params[f"{self.prefix}/W{i}"] = w
            if self.bias:
                params[f"{self.prefix}/b{i}"] = np.zeros(fan_out)
        return params

    def zero_params(self):
        params = {}
        for i, (fan_in, fan_out) in enumerate(zip(self.sizes[:-1], self.sizes[1:])):
            params[f"{self.prefix}/W{i}"] = np.zeros((fan_in, fan_out))
            if self.bias:
                params[f"{self.prefix}/b{i}"] = np.zeros(fan_out)
        return params

    def forward(self, x, params):
        h = ad.as_tensor(x)
        for i in range(self.n_layers):
            h = ad.matmul(h, params[f"{self.prefix}/W{i}"])
            if self.bias:
                h = h + params[f"{self.prefix}/b{i}"]
            act = self.output if i == self.n_layers - 1 else self.hidden
            h = ACTIVATIONS[act](h)
        return h

    def __call__(self, x, params):
        return self.forward(x, params)
