import numpy as np


class Adam:
    """Adaptive moment estimation with per-parameter step counts; frozen parameters are skipped."""

    def __init__(self, learning_rate=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.first = {}
        self.second = {}
        self.steps = {}

    def step(self, params):
        for name, p in params.items():
            if not p.requires_grad or p.grad is None:
                continue
            t = self.steps.get(name, 0) + 1
            m = self.beta1 * self.first.get(name, 0.0) + (1.0 - self.beta1) * p.grad
            v = self.beta2 * self.second.get(name, 0.0) + (1.0 - self.beta2) * p.grad ** 2
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.data = p.data - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)
            self.first[name], self.second[name], self.steps[name] = m, v, t

    def state(self):
        return {"first": dict(self.first), "second": dict(self.second), "steps": dict(self.steps)}

    def load_state(self, state):
        self.first = dict(state.get("first", {}))
        self.second = dict(state.get("second", {}))
        self.steps = {name: int(t) for name, t in state.get("steps", {}).items()}
