import numpy as np
import pytest
from conftest import forecaster_grad_check

from nowcast.errors import ConfigurationError, FormatError, NumericError, ShapeError
from nowcast.forecaster import (
    ForecasterSpec,
    PersistenceModel,
    TrainConfig,
    build,
    decode_checkpoint,
    deep_spec,
    encode_checkpoint,
    fit,
    load_checkpoint,
    parameter_count,
    persistence_baseline,
    save_checkpoint,
    shallow_spec,
    train_step,
)
from nowcast.griddata import GeneratorConfig, GridSequence, SamplePair, generate_synthetic
from nowcast.nn import ParameterStore, init_conv
from nowcast.optim import Optimizer


def small_spec(**kw):
    base = dict(levels=2, channels=(4, 6), gate_type="conv", t_in=3, t_out=2, height=8, width=8)
    base.update(kw)
    return ForecasterSpec(**base)


def random_input(spec, n=2, seed=0):
    return np.random.default_rng(seed).uniform(size=(n, spec.t_in, spec.height, spec.width, spec.in_channels))


def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ForecasterSpec(levels=1, channels=(4,))
    with pytest.raises(ConfigurationError):
        ForecasterSpec(levels=3, channels=(4, 4))
    with pytest.raises(ConfigurationError):
        ForecasterSpec(gate_type="lstm")
    with pytest.raises(ConfigurationError):
        ForecasterSpec(targets=("cma",))
    with pytest.raises(ShapeError):
        build(small_spec(levels=3, channels=(2, 2, 2), height=6, width=8))


def test_shallow_drops_the_deepest_level():
    deep = deep_spec()
    assert deep.levels == 4 and deep.channels == (32, 48, 64, 80)
    shallow = shallow_spec()
    assert shallow.levels == 3 and shallow.channels == (32, 48, 64)
    assert deep.shallow() == shallow


def test_shallow_has_fewer_parameters():
    chans = (4, 6, 8, 10)
    deep = build(deep_spec(channels=chans, gate_type="residual"))
    shallow = build(shallow_spec(channels=chans, gate_type="residual"))
    assert parameter_count(shallow) < parameter_count(deep)


def test_parameter_count_of_single_conv():
    w, b = init_conv(np.random.default_rng(0), 3, 1, 1)
    assert parameter_count(ParameterStore({"w": w, "b": b})) == 10


def test_same_seed_same_parameters():
    a, b, c = build(small_spec(), 3), build(small_spec(), 3), build(small_spec(), 4)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert not all(np.array_equal(a.params[k], c.params[k]) for k in a.params)


@pytest.mark.parametrize("gate_type", ["conv", "residual"])
def test_output_shape_and_range(gate_type):
    spec = small_spec(gate_type=gate_type, targets=("crr_intensity",))
    model = build(spec)
    y = model.predict_batch(random_input(spec) * 50)
    assert y.shape == (2, spec.t_out, 8, 8, 1)
    assert y.min() >= 0 and y.max() <= 1


def test_predict_contract():
    spec = small_spec()
    model = build(spec)
    seq = GridSequence(random_input(spec, 1)[0], spec.inputs)
    out = model.predict(seq)
    assert out.frames.shape == (spec.t_out, 8, 8, 2)
    assert out.variable_names == spec.targets
    with pytest.raises(ShapeError):
        model.predict(GridSequence(seq.frames[:2], spec.inputs))
    with pytest.raises(ShapeError):
        model.predict(GridSequence(seq.frames, ("a", "b")))


def test_full_model_gradient_conv_gates():
    report = forecaster_grad_check("conv")
    assert report.passed, str(report)


def test_float64_and_float32_agree():
    spec = small_spec()
    m32 = build(spec, 1)
    m64 = m32.astype(np.float64)
    x = random_input(spec)
    np.testing.assert_allclose(m32.predict_batch(x), m64.predict_batch(x), atol=1e-5)


def test_perfect_batch_leaves_parameters_unchanged():
    spec = small_spec()
    model = build(spec, 2)
    x = random_input(spec)
    y_pred = model.forward(x)[0]
    y = np.zeros(x.shape[:1] + (spec.t_out,) + x.shape[2:])
    y[...] = y_pred
    before = {k: v.copy() for k, v in model.params.values.items()}
    loss = train_step(model, (x, y), Optimizer(method="adam"))
    assert loss == 0.0
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_overfit_one_batch():
    spec = small_spec()
    model = build(spec, 0)
    rng = np.random.default_rng(1)
    x = random_input(spec, 4)
    y = rng.uniform(size=(4, spec.t_out, 8, 8, 2))
    opt = Optimizer(method="adabelief", lr=3e-3)
    losses = [train_step(model, (x, y), opt) for _ in range(200)]
    assert losses[-1] < 0.5 * losses[0]
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_training_is_deterministic():
    spec = small_spec()
    data = generate_synthetic(GeneratorConfig(n_samples=8, n_validation=0, height=8, width=8, t_in=3, t_out=2))
    runs = []
    for _ in range(2):
        model = build(spec, 5)
        hist = fit(model, data.arrays("train"), Optimizer(), TrainConfig(epochs=2, batch_size=4, augment=True))
        runs.append(([h["train_loss"] for h in hist], encode_checkpoint(model)))
    assert runs[0] == runs[1]


def test_non_finite_input_aborts():
    spec = small_spec()
    model = build(spec)
    x = random_input(spec)
    y = np.zeros((2, spec.t_out, 8, 8, 2))
    x[0, 0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        train_step(model, (x, y), Optimizer())


def test_train_step_accepts_sample_lists():
    spec = small_spec()
    data = generate_synthetic(GeneratorConfig(n_samples=2, n_validation=0, height=8, width=8, t_in=3, t_out=2))
    loss = train_step(build(spec), data.split("train"), Optimizer())
    assert np.isfinite(loss)


def test_parameter_count_invariant_under_training():
    spec = small_spec()
    model = build(spec)
    n = parameter_count(model)
    train_step(model, (random_input(spec), np.zeros((2, 2, 8, 8, 2))), Optimizer())
    assert parameter_count(model) == n


def test_plateau_schedule_halves_lr():
    spec = small_spec()
    model = build(spec)
    x = random_input(spec, 2)
    y = np.zeros((2, spec.t_out, 8, 8, 2))
    # a validation set the model cannot improve on with a tiny lr
    opt = Optimizer(lr=1e-9)
    hist = fit(model, (x, y), opt, TrainConfig(epochs=4, batch_size=2, lr_schedule="plateau", patience=1),
               validation=(x, 1 - model.predict_batch(x)[..., :1].repeat(2, -1)))
    assert hist[-1]["lr"] < 1e-9


def test_train_config_from_mapping():
    cfg = TrainConfig.from_mapping({"epochs": "3", "augment": "yes", "clip": "1.5"})
    assert (cfg.epochs, cfg.augment, cfg.clip) == (3, True, 1.5)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_mapping({"epoch": "3"})
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_schedule="cosine")


# persistence ---------------------------------------------------------------------------


def test_persistence_repeats_last_frame():
    frames = np.random.default_rng(0).uniform(size=(4, 3, 3, 2))
    seq = GridSequence(frames)
    out = persistence_baseline(seq, 3)
    assert len(out) == 3
    for t in range(3):
        np.testing.assert_array_equal(out.frames[t], seq.frames[-1])


def test_persistence_is_exact_on_static_data():
    cfg = GeneratorConfig(n_samples=4, n_validation=0, height=8, width=8, velocity_min=0, velocity_max=0, diffusion=0)
    data = generate_synthetic(cfg)
    model = PersistenceModel(cfg.t_out, cfg.variables, cfg.variables)
    for s in data.split("train"):
        np.testing.assert_array_equal(model.predict(s.input).frames, s.target.frames)
    x, y = data.arrays("train")
    np.testing.assert_array_equal(model.predict_batch(x), y)


def test_persistence_target_selection():
    frames = np.random.default_rng(0).uniform(size=(2, 3, 3, 2)).astype(np.float32)
    model = PersistenceModel(2, ["b"], ["a", "b"])
    seq = GridSequence(frames, ("a", "b"))
    np.testing.assert_array_equal(model.predict(seq).frames[..., 0], frames[[-1, -1], ..., 1])
    np.testing.assert_array_equal(model.predict_batch(frames[None])[0], model.predict(seq).frames)


def test_static_training_approaches_persistence():
    # persistence is the exact answer on a frozen field; training has to find it
    cfg = GeneratorConfig(n_samples=16, n_validation=8, height=16, width=16, t_in=2, t_out=2, n_blobs=4,
                          sigma_min=1.5, sigma_max=3, velocity_min=0, velocity_max=0, diffusion=0, seed=3,
                          variables=("temperature",), rain_variables=())
    data = generate_synthetic(cfg)
    spec = ForecasterSpec(levels=2, channels=(16, 16), gate_type="conv", t_in=2, t_out=2, height=16, width=16,
                          inputs=("temperature",))
    model = build(spec, 0)
    fit(model, data.arrays("train"), Optimizer(lr=1e-2), TrainConfig(epochs=80, batch_size=8, augment=True))
    vx, vy = data.arrays("validation")
    persistence = PersistenceModel(2, spec.inputs).predict_batch(vx)
    np.testing.assert_array_equal(persistence, vy)
    assert float(np.mean((model.predict_batch(vx) - persistence) ** 2)) < 1e-3


# checkpoints ------------------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    model = build(small_spec(gate_type="residual", targets=("temperature",)), 7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    assert back.spec == model.spec
    assert back.params.names() == model.params.names()
    for k in model.params:
        assert back.params[k].tobytes() == model.params[k].tobytes()
    assert encode_checkpoint(back) == path.read_bytes()


def test_checkpoint_errors():
    blob = encode_checkpoint(build(small_spec()))
    with pytest.raises(FormatError) as exc:
        decode_checkpoint(b"XXXX" + blob[4:])
    assert exc.value.field == "magic"
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:-3])
    with pytest.raises(FormatError):
        decode_checkpoint(blob + b"\0")
    other = encode_checkpoint(build(small_spec(channels=(4, 5))))
    # header of one spec, parameters of another
    hlen = int.from_bytes(blob[4:8], "little")
    olen = int.from_bytes(other[4:8], "little")
    with pytest.raises(FormatError):
        decode_checkpoint(blob[:8 + hlen] + other[8 + olen:])


def test_sample_pair_shapes_survive_prediction():
    spec = small_spec()
    model = build(spec)
    frames = random_input(spec, 1)[0].astype(np.float32)
    pair = SamplePair(GridSequence(frames, spec.inputs), GridSequence(frames[:2], spec.inputs), "train")
    assert model.predict(pair.input).frames.shape == pair.target.frames.shape
