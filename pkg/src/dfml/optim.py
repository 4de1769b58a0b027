"""A small functional Adam over named tensor collections.

torch.optim assumes nn.Module parameters that are updated in place; here
most updates are functional (new tensors replacing old ones in an ordered
dict), and optimizer state must be checkpointable as plain tensors, so we
keep our own minimal implementation.
"""

from collections import OrderedDict

import torch

from .errors import NumericError


class Adam:
    def __init__(self, ref_params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr = float(lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = OrderedDict((k, torch.zeros_like(v)) for k, v in ref_params.items())
        self.v = OrderedDict((k, torch.zeros_like(v)) for k, v in ref_params.items())

    def step(self, params, grads):
        """Return updated copies of ``params`` given matching ``grads``."""
        for g in grads.values():
            if not torch.isfinite(g).all():
                raise NumericError("non-finite gradient in Adam step")
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        out = OrderedDict()
        with torch.no_grad():
            for k, p in params.items():
                g = grads[k]
                self.m[k].mul_(self.beta1).add_(g, alpha=1.0 - self.beta1)
                self.v[k].mul_(self.beta2).addcmul_(g, g, value=1.0 - self.beta2)
                m_hat = self.m[k] / bc1
                v_hat = self.v[k] / bc2
                out[k] = (p - self.lr * m_hat / (v_hat.sqrt() + self.eps)).detach()
        return out

    def state_dict(self):
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2,
                "eps": self.eps, "step_count": self.step_count,
                "m": self.m, "v": self.v}

    def load_state_dict(self, state):
        self.lr = state["lr"]
        self.beta1 = state["beta1"]
        self.beta2 = state["beta2"]
        self.eps = state["eps"]
        self.step_count = state["step_count"]
        self.m = state["m"]
        self.v = state["v"]
