import abc
import logging

import numpy as np

from mpg.game import Box
from mpg.lib import ConfigurationError

log = logging.getLogger(__name__)


def _slices(dims):
    edges = np.cumsum((0,) + tuple(dims))
    return [slice(int(lo), int(hi)) for lo, hi in zip(edges[:-1], edges[1:])]


class PolicyFamily(abc.ABC):
    """
    Parametric closed-loop policy a = pi(x, w) made of one block per agent.

    Agent k reads the state components ``state_indices[k]`` and owns the
    parameter block ``w[param_slices[k]]``. ``forward`` is deterministic;
    exploration noise is added by the caller.
    """

    kind = None

    def __init__(self, state_indices, action_dims, param_dims, param_box=None, exploration_std=0.05):
        self.state_indices = tuple(tuple(int(m) for m in indices) for indices in state_indices)
        self.action_dims = tuple(int(d) for d in action_dims)
        self.param_dims = tuple(int(d) for d in param_dims)
        if not (len(self.state_indices) == len(self.action_dims) == len(self.param_dims)):
            raise ConfigurationError("state_indices, action_dims and param_dims need one entry per agent")
        if param_box is None:
            param_box = Box.unbounded(self.num_params)
        elif not isinstance(param_box, Box):
            lower, upper = param_box
            param_box = Box.uniform(lower, upper, self.num_params)
        self.param_box = param_box
        if self.param_box.size != self.num_params:
            raise ConfigurationError(
                f"param_box has {self.param_box.size} components, policy has {self.num_params}", key="param_box"
            )
        self.exploration_std = np.broadcast_to(np.asarray(exploration_std, dtype=float), (self.action_dim,)).copy()

    @property
    def num_agents(self):
        return len(self.action_dims)

    @property
    def num_params(self):
        return sum(self.param_dims)

    @property
    def action_dim(self):
        return sum(self.action_dims)

    @property
    def param_slices(self):
        return _slices(self.param_dims)

    @property
    def action_slices(self):
        return _slices(self.action_dims)

    def blocks(self, w):
        w = np.asarray(w, dtype=float)
        return [w[s] for s in self.param_slices]

    def with_block(self, w, k, w_k):
        """Copy of w with agent k's block replaced."""
        w = np.array(w, dtype=float)
        w[self.param_slices[k]] = w_k
        return w

    def with_exploration(self, std):
        self.exploration_std = np.broadcast_to(np.asarray(std, dtype=float), (self.action_dim,)).copy()
        return self

    def forward(self, x, w):
        x = np.asarray(x, dtype=float)
        return np.concatenate([self.agent_forward(k, x, w_k) for k, w_k in enumerate(self.blocks(w))])

    def agent_forward(self, k, x, w_k):
        return self.agent_forward_batch(k, np.asarray(x, dtype=float)[None, :], w_k)[0]

    def forward_batch(self, states, w):
        """Action means for a batch of states, shape (B, A)."""
        states = np.atleast_2d(np.asarray(states, dtype=float))
        return np.concatenate(
            [self.agent_forward_batch(k, states, w_k) for k, w_k in enumerate(self.blocks(w))], axis=1
        )

    def vjp(self, states, w, cotangent):
        """
        Sum over the batch of cotangent_b^T d pi(x_b, w) / dw, shape (W,).
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        cotangent = np.asarray(cotangent, dtype=float)
        return np.concatenate(
            [
                self.agent_vjp(k, states, w_k, cotangent[:, s])
                for k, (w_k, s) in enumerate(zip(self.blocks(w), self.action_slices))
            ]
        )

    def jacobian(self, x, w):
        """Block-diagonal Jacobian of the joint action mean, shape (A, W)."""
        jac = np.zeros((self.action_dim, self.num_params))
        for k, (w_k, a_s, p_s) in enumerate(zip(self.blocks(w), self.action_slices, self.param_slices)):
            jac[a_s, p_s] = self.agent_jacobian(k, x, w_k)
        return jac

    def agent_jacobian(self, k, x, w_k):
        x = np.asarray(x, dtype=float)[None, :]
        eye = np.eye(self.action_dims[k])
        return np.array([self.agent_vjp(k, x, w_k, eye[o][None, :]) for o in range(self.action_dims[k])])

    @abc.abstractmethod
    def agent_forward_batch(self, k, states, w_k):
        """Agent k's action means for a batch of full states, shape (B, A_k)."""

    @abc.abstractmethod
    def agent_vjp(self, k, states, w_k, cotangent):
        """Vector-Jacobian product of agent k's block, shape (W_k,)."""

    @abc.abstractmethod
    def initial_params(self, rng):
        """A starting parameter vector inside param_box."""


class LinearPolicy(PolicyFamily):
    """
    a_k = M_k x[state_indices[k]] with a gain matrix M_k of shape (A_k, |X_k|).
    """

    kind = "linear"

    def __init__(self, state_indices, action_dims, param_box=None, exploration_std=0.05, init=0.0):
        param_dims = [len(idx) * a for idx, a in zip(state_indices, action_dims)]
        super().__init__(state_indices, action_dims, param_dims, param_box, exploration_std)
        self.init = init

    def _gain(self, k, w_k):
        return np.asarray(w_k, dtype=float).reshape(self.action_dims[k], len(self.state_indices[k]))

    def agent_forward_batch(self, k, states, w_k):
        selected = states[:, list(self.state_indices[k])]
        return selected @ self._gain(k, w_k).T

    def agent_vjp(self, k, states, w_k, cotangent):
        selected = states[:, list(self.state_indices[k])]
        return (cotangent.T @ selected).ravel()

    def initial_params(self, rng):
        return self.param_box.clip(np.full(self.num_params, self.init, dtype=float))


class ConstantPolicy(PolicyFamily):
    """a_k = w_k whatever the state."""

    kind = "tabular-constant"

    def __init__(self, action_dims, param_box=None, exploration_std=0.05, init=0.0):
        super().__init__([()] * len(action_dims), action_dims, action_dims, param_box, exploration_std)
        self.init = init

    def agent_forward_batch(self, k, states, w_k):
        return np.broadcast_to(np.asarray(w_k, dtype=float), (states.shape[0], self.action_dims[k])).copy()

    def agent_vjp(self, k, states, w_k, cotangent):
        return cotangent.sum(axis=0)

    def initial_params(self, rng):
        return self.param_box.clip(np.full(self.num_params, self.init, dtype=float))


class MlpPolicy(PolicyFamily):
    """
    One feedforward RELU network per agent; the linear output layer is the
    mean of a Gaussian with a fixed global log-std.

    Parameters of agent k are laid out layer by layer, each layer's weight
    matrix (fan_in x fan_out, row-major) followed by its bias.
    """

    kind = "mlp"

    def __init__(
        self,
        state_indices,
        action_dims,
        hidden=(32, 32, 32),
        log_std=np.log(0.1),
        param_box=None,
        output_scale=0.01,
        init_mean=0.0,
    ):
        self.hidden = tuple(int(h) for h in hidden)
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigurationError(f"hidden layer sizes must be positive, got {hidden}", key="hidden")
        self.layer_shapes = [
            self._layer_shapes(len(idx), self.hidden, a) for idx, a in zip(state_indices, action_dims)
        ]
        param_dims = [self.layer_param_count(shapes) for shapes in self.layer_shapes]
        super().__init__(state_indices, action_dims, param_dims, param_box, float(np.exp(log_std)))
        self.log_std = float(log_std)
        self.output_scale = output_scale
        self.init_mean = init_mean

    @staticmethod
    def _layer_shapes(fan_in, hidden, fan_out):
        sizes = (fan_in,) + tuple(hidden) + (fan_out,)
        return list(zip(sizes[:-1], sizes[1:]))

    @staticmethod
    def layer_param_count(shapes):
        return sum(n_in * n_out + n_out for n_in, n_out in shapes)

    def unpack(self, k, w_k):
        """List of (weight, bias) pairs of agent k's network."""
        w_k = np.asarray(w_k, dtype=float)
        layers, offset = [], 0
        for n_in, n_out in self.layer_shapes[k]:
            weight = w_k[offset : offset + n_in * n_out].reshape(n_in, n_out)
            offset += n_in * n_out
            bias = w_k[offset : offset + n_out]
            offset += n_out
            layers.append((weight, bias))
        return layers

    def _forward(self, k, states, w_k):
        layers = self.unpack(k, w_k)
        h = states[:, list(self.state_indices[k])]
        activations, pre_activations = [h], []
        for depth, (weight, bias) in enumerate(layers):
            z = h @ weight + bias
            pre_activations.append(z)
            h = np.maximum(z, 0.0) if depth < len(layers) - 1 else z
            activations.append(h)
        return layers, activations, pre_activations

    def agent_forward_batch(self, k, states, w_k):
        return self._forward(k, states, w_k)[1][-1]

    def agent_vjp(self, k, states, w_k, cotangent):
        layers, activations, pre_activations = self._forward(k, states, w_k)
        delta = np.asarray(cotangent, dtype=float).reshape(states.shape[0], self.action_dims[k])
        grads = [None] * len(layers)
        for depth in reversed(range(len(layers))):
            weight, _ = layers[depth]
            grads[depth] = np.concatenate([(activations[depth].T @ delta).ravel(), delta.sum(axis=0)])
            if depth > 0:
                # subgradient 0 at a kink
                delta = (delta @ weight.T) * (pre_activations[depth - 1] > 0.0)
        return np.concatenate(grads)

    def initial_params(self, rng):
        blocks = []
        for shapes in self.layer_shapes:
            for depth, (n_in, n_out) in enumerate(shapes):
                if depth < len(shapes) - 1:
                    weight = rng.normal(0.0, np.sqrt(2.0 / n_in), (n_in, n_out))
                    bias = np.zeros(n_out)
                else:
                    weight = rng.normal(0.0, self.output_scale, (n_in, n_out))
                    bias = np.full(n_out, self.init_mean, dtype=float)
                blocks.extend([weight.ravel(), bias])
        return self.param_box.clip(np.concatenate(blocks))
