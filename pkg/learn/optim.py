import numpy as np


class Adam:
    """Adam поверх словаря параметров сети (обновление на месте)."""

    def __init__(self, params, lr=0.05, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.first = {name: np.zeros_like(value) for name, value in params.items()}
        self.second = {name: np.zeros_like(value) for name, value in params.items()}

    def step(self, grads):
        self.step_count += 1
        correction1 = 1.0 - self.beta1 ** self.step_count
        correction2 = 1.0 - self.beta2 ** self.step_count
        for name, grad in grads.items():
            self.first[name] = self.beta1 * self.first[name] + (1.0 - self.beta1) * grad
            self.second[name] = self.beta2 * self.second[name] + (1.0 - self.beta2) * grad ** 2
            update = (self.first[name] / correction1) / (np.sqrt(self.second[name] / correction2) + self.eps)
            self.params[name] -= self.lr * update


def step_decay(base_lr, epoch, epochs, decay_at=0.4, factor=0.1):
    """Скорость обучения с однократным уменьшением после доли decay_at эпох."""
    boundary = max(1, int(decay_at * epochs))
    return base_lr * (factor if epoch >= boundary and decay_at < 1.0 else 1.0)
