import math

import numpy as np
import pytest

from robust_act import diff_core as dc
from robust_act.errors import CheckpointError, ConfigurationError, NonFiniteError, StateError

from oracles import central_difference, rel_err


def scalar_tape(build, arity=1):
    tape = dc.Tape()
    xs = [tape.input(f"x{i}") for i in range(arity)]
    tape.output(build(*xs))
    return tape


@pytest.mark.parametrize("build, inputs, expected", [
    (lambda x: x * x, [3.0], 9.0),
    (lambda x: x, [7.0], 7.0),
])
def test_forward_examples(build, inputs, expected):
    tape = scalar_tape(build)
    assert dc.tape_forward(tape, inputs) == [expected]


def test_forward_two_inputs():
    tape = scalar_tape(lambda x, y: x * y + y, arity=2)
    assert tape.forward([2.0, 3.0]) == [9.0]


def test_backward_examples():
    tape = scalar_tape(lambda x: x * x)
    tape.forward([3.0])
    assert dc.tape_backward(tape, 0) == [6.0]

    tape = scalar_tape(lambda x: x)
    for x in (-2.0, 0.0, 11.5):
        tape.forward([x])
        assert tape.backward(0) == [1.0]

    tape = scalar_tape(lambda x, y: x * y, arity=2)
    tape.forward([2.0, 3.0])
    assert tape.backward(0) == [3.0, 2.0]


def test_arity_mismatch_is_configuration_error():
    tape = scalar_tape(lambda x, y: x + y, arity=2)
    with pytest.raises(ConfigurationError):
        tape.forward([1.0])


def test_backward_before_forward_is_state_error():
    tape = scalar_tape(lambda x: x * x)
    with pytest.raises(StateError):
        tape.backward(0)
    tape.forward([1.0])
    dc.exp(tape.input("late"))  # appending invalidates cached values
    with pytest.raises(StateError):
        tape.backward(0)


def test_operands_refer_to_earlier_nodes():
    tape = scalar_tape(lambda x, y: dc.tanh(x * y) + dc.log(dc.square(y) + 1.0), arity=2)
    for i, ops in enumerate(tape._operands):
        assert all(j < i for j in ops)


def test_chain_rule_through_product():
    tape = dc.Tape()
    x, y = tape.input("x"), tape.input("y")
    p = x * y
    tape.output(dc.square(p))
    tape.forward([2.0, 3.0])
    # d/dx (xy)^2 = 2xy * y
    assert tape.backward(0) == [36.0, 24.0]


UNARY = ["neg", "reciprocal", "exp", "log", "tanh", "square"]


def random_tape(rng, depth):
    """Random scalar expression over two inputs using every primitive."""
    tape = dc.Tape()
    x, y = tape.input("x"), tape.input("y")
    pool = [x, y]
    for _ in range(depth):
        kind = rng.choice(["add", "mul", "minimum", "maximum"] + UNARY)
        a = pool[rng.integers(len(pool))]
        if kind in ("add", "mul", "minimum", "maximum"):
            b = pool[rng.integers(len(pool))]
            node = {"add": a + b, "mul": a * b, "minimum": dc.minimum(a, b),
                    "maximum": dc.maximum(a, b)}[kind]
        elif kind in ("reciprocal", "log"):
            safe = dc.square(a) + 0.5
            node = dc.reciprocal(safe) if kind == "reciprocal" else dc.log(safe)
        elif kind == "exp":
            node = dc.exp(dc.tanh(a))
        else:
            node = {"neg": -a, "tanh": dc.tanh(a), "square": dc.square(dc.tanh(a))}[kind]
        pool.append(node)
    tape.output(pool[-1] + 0.1 * pool[-2])
    return tape


def test_random_tapes_match_finite_differences():
    rng = np.random.default_rng(1234)
    checked = 0
    while checked < 100:
        tape = random_tape(rng, int(rng.integers(1, 21)))
        x0 = rng.uniform(-1.5, 1.5, size=2)
        tape.forward(list(x0))
        grad = np.array(tape.backward(0))
        fd = central_difference(lambda v: tape.forward(list(v))[0], x0)
        # min/max kinks: skip points within reach of the FD stencil
        vals = tape._values
        near_kink = any(
            k in ("minimum", "maximum") and abs(vals[o[0]] - vals[o[1]]) < 1e-3
            for k, o in zip(tape._kinds, tape._operands)
        )
        tape.forward(list(x0))
        if near_kink:
            continue
        assert rel_err(grad, fd, floor=1e-6) <= 1e-4
        checked += 1


def test_matmul_sum_broadcast_gradients():
    rng = np.random.default_rng(0)
    tape = dc.Tape()
    w = tape.input("w", (3, 4))
    b = tape.input("b", (4,))
    x = tape.input("x", (5, 3))
    out = dc.mean(dc.square(dc.tanh(x @ w + b)), axis=None)
    tape.output(dc.reduce_sum(out * 1.0))
    vals = [rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=(5, 3))]
    tape.forward(vals)
    grads = tape.backward(0)
    for i in range(3):
        def f(v, i=i):
            args = list(vals)
            args[i] = v
            return tape.forward(args)[0]
        assert rel_err(grads[i], central_difference(f, vals[i]), floor=1e-6) <= 1e-6
        tape.forward(vals)


def test_forward_is_deterministic_and_side_effect_free():
    rng = np.random.default_rng(3)
    params = dc.ParameterVector.from_arrays({"w": rng.normal(size=(2, 2)), "b": np.zeros(2)})
    before = params.values.copy()
    tape = dc.Tape()
    w = tape.input("w", (2, 2))
    b = tape.input("b", (2,))
    tape.output(dc.reduce_sum(dc.tanh(w @ np.ones(2) + b)))
    args = [params.segment("w").reshape(2, 2), params.segment("b")]
    first = tape.forward(args)
    tape.backward(0)
    second = tape.forward(args)
    assert first == second
    np.testing.assert_array_equal(params.values, before)


# --- ParameterVector ---------------------------------------------------------

def test_parameter_vector_segments_cover_array():
    pv = dc.ParameterVector.from_arrays({"a": np.ones((2, 3)), "b": np.zeros(4)})
    assert pv.segments == {"a": (0, 6), "b": (6, 4)}
    assert len(pv) == 10
    with pytest.raises(ConfigurationError):
        dc.ParameterVector(np.zeros(5), {"a": (0, 3)})
    with pytest.raises(ConfigurationError):
        dc.ParameterVector(np.zeros(4), {"a": (0, 3), "b": (2, 2)})


def test_checkpoint_roundtrip_and_layout(tmp_path):
    pv = dc.ParameterVector.from_arrays({"trunk": np.arange(3.0), "log_std": np.array([-0.5])})
    path = tmp_path / "p.bin"
    dc.save_parameters(pv, path)
    raw = path.read_bytes()
    assert raw[:4] == b"RACT"
    assert int.from_bytes(raw[4:8], "little") == dc.FORMAT_VERSION
    # the value block is the trailing little-endian f64 array
    np.testing.assert_array_equal(np.frombuffer(raw[-32:], "<f8"), pv.values)
    assert dc.load_parameters(path) == pv


def test_checkpoint_rejects_garbage(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + bytes(20))
    with pytest.raises(CheckpointError):
        dc.load_parameters(path)
    path.write_bytes(b"RACT" + (1).to_bytes(4, "little") + (3).to_bytes(4, "little"))
    with pytest.raises(CheckpointError):
        dc.load_parameters(path)


# --- Adam --------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params_unchanged():
    pv = dc.ParameterVector.from_arrays({"w": np.array([1.0, -2.0, 3.5])})
    before = pv.values.copy()
    state = dc.AdamState.zeros(3)
    for _ in range(3):
        dc.adam_step(pv, np.zeros(3), state)
    np.testing.assert_array_equal(pv.values, before)
    assert state.step == 3


def test_adam_single_step_hand_computed():
    # m = 0.1, v = 0.001; m_hat = 1, v_hat = 1 -> step = lr * 1 / (1 + 1e-8)
    pv = dc.ParameterVector.from_arrays({"w": np.array([1.0])})
    state = dc.AdamState.zeros(1, lr=0.1)
    dc.adam_step(pv, np.array([1.0]), state)
    expected = 1.0 - 0.1 * 1.0 / (1.0 + 1e-8)
    assert pv.values[0] == pytest.approx(expected, abs=1e-15)
    assert pv.values[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_positive_gradient_descends_monotonically():
    pv = dc.ParameterVector.from_arrays({"w": np.array([0.0])})
    state = dc.AdamState.zeros(1)
    seen = [pv.values[0]]
    for _ in range(5):
        dc.adam_step(pv, np.array([0.7]), state)
        seen.append(pv.values[0])
    assert all(b < a for a, b in zip(seen, seen[1:]))


def test_adam_rejects_nonfinite_gradient_and_names_segment():
    pv = dc.ParameterVector.from_arrays({"trunk": np.zeros(2), "log_std": np.zeros(2)})
    state = dc.AdamState.zeros(4)
    with pytest.raises(NonFiniteError) as info:
        dc.adam_step(pv, np.array([0.0, 0.0, math.nan, 1.0]), state)
    assert info.value.segment == "log_std"
    assert state.step == 0
    np.testing.assert_array_equal(pv.values, 0.0)


def test_adam_length_mismatch():
    pv = dc.ParameterVector.from_arrays({"w": np.zeros(2)})
    with pytest.raises(ConfigurationError):
        dc.adam_step(pv, np.zeros(3), dc.AdamState.zeros(2))


def test_adam_keeps_values_finite():
    rng = np.random.default_rng(0)
    pv = dc.ParameterVector.from_arrays({"w": rng.normal(size=50)})
    state = dc.AdamState.zeros(50, lr=1e-2)
    for _ in range(200):
        dc.adam_step(pv, rng.normal(scale=1e6, size=50), state)
        assert np.all(np.isfinite(pv.values))
