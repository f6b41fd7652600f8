import numpy as np


class Adam:
    """Adaptive-moment update over a list of numpy parameter arrays (updated in place)."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = list(lr) if isinstance(lr, (list, tuple)) else [float(lr)] * len(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for p, g, m, v, lr in zip(self.params, grads, self.m, self.v, self.lr):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if lr == 0.0:
                continue
            p -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
