import numpy as np
import pytest
import torch

from videogeom.chunk_attention import ChunkPartition, SequenceError
from videogeom.geometry import SceneSpec, synth_scene
from videogeom.losses import LossWeights
from videogeom.model import GeometryModel, ModelConfig, gelu, init_model
from videogeom.tensors import ShapeError
from videogeom.teacher import TeacherModel, ToyTeacher, train_toy_teacher
from videogeom.training import DataConfig, TrainingError, sample_partition, train_toy


@pytest.fixture(scope="module")
def model():
    return init_model(ModelConfig(seed=3)).eval()


@pytest.fixture(scope="module")
def frames():
    return torch.from_numpy(synth_scene(SceneSpec(kind="sphere", n_frames=6), seed=2).rgb)


def test_config_validation_and_chunk_layers():
    assert ModelConfig().chunk_layers() == [2, 5]
    assert ModelConfig(n_backbone_layers=4, chunk_attn_ratio=1.0).chunk_layers() == [0, 1, 2, 3]
    assert ModelConfig(n_backbone_layers=4, chunk_attn_ratio=0.25).chunk_layers() == [3]
    for bad in (dict(width=30, heads=4), dict(chunk_attn_ratio=0.2), dict(chunk_attn_ratio=0.0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad)
    cfg = ModelConfig(width=32, seed=9)
    assert ModelConfig.from_kv(cfg.to_kv()) == cfg


def test_gelu_matches_reference():
    x = torch.linspace(-6, 6, 101, dtype=torch.float64)
    assert torch.allclose(gelu(x), torch.nn.functional.gelu(x), atol=1e-12)
    # elementwise result does not depend on the tensor it sits in
    y = torch.randn(1000)
    assert torch.equal(gelu(y)[:7], gelu(y[:7].clone()))


def test_output_invariants(model, frames):
    with torch.no_grad():
        out = model(frames)
    assert out.points.shape == (6, 3, 16, 16) and out.normals.shape == (6, 3, 16, 16)
    assert torch.equal(out.depth, out.points[:, 2])
    assert torch.all(out.depth > 0)
    assert torch.allclose(out.normals.norm(dim=1), torch.ones(6, 16, 16), atol=1e-5)


def test_modes_equal_their_partitions(model, frames):
    with torch.no_grad():
        stream = model.run(frames, "streaming")
        assert torch.equal(stream.points, model(frames, ChunkPartition.streaming(6)).points)
        chunked = model.run(frames, "chunked:4")
        assert torch.equal(chunked.normals, model(frames, ChunkPartition((4, 2))).normals)
        assert torch.equal(model.run(frames, "offline").points, model(frames).points)
        # the first frame sees only itself under streaming
        assert torch.equal(stream.points[:1], model(frames[:1]).points)


def test_earlier_chunks_ignore_later_frames(model, frames):
    other = frames.clone()
    other[4:] = torch.rand_like(other[4:])
    part = ChunkPartition((2, 2, 2))
    with torch.no_grad():
        assert torch.equal(model(frames, part).points[:4], model(other, part).points[:4])
        assert not torch.equal(model(frames).points[:4], model(other).points[:4])


def test_temporal_off_is_per_frame(model, frames):
    with torch.no_grad():
        a = model(frames, temporal=False).points
        b = torch.cat([model(frames[i : i + 1], temporal=False).points for i in range(6)])
    assert torch.equal(a, b)


def test_window_bounds_cache(model, frames):
    with torch.no_grad():
        state = model.new_stream(window=2)
        for a in range(0, 6, 2):
            model.forward_streaming(frames[a : a + 2], state, start_frame=a)
    assert state.peak_cache_frames == 2
    with pytest.raises(SequenceError):
        model.forward_streaming(frames[:1], state, start_frame=0)


def test_long_sequences_cap_frame_embedding(model):
    x = torch.rand(70, 3, 8, 8)
    with torch.no_grad():
        assert model.run(x, "chunked:35").points.shape == (70, 3, 8, 8)


def test_shape_errors(model):
    with pytest.raises(ShapeError):
        model(torch.rand(2, 3, 12, 12))
    with pytest.raises(ShapeError):
        model(torch.rand(2, 3, 16, 16), ChunkPartition((3,)))


def test_checkpoint_tensors_round_trip(model, frames):
    clone = GeometryModel(ModelConfig(seed=99)).eval()
    clone.load_tensors(model.tensors())
    with torch.no_grad():
        assert torch.equal(clone(frames).points, model(frames).points)


def test_short_training_run_logs_and_moves_weights():
    data = DataConfig(batch_size=1, seed=1)
    cfg = ModelConfig(seed=1)
    before = init_model(cfg).tensors()
    m, log = train_toy(cfg, data, steps=3, lr=1e-3, weights=LossWeights(0.1, 0.1))
    assert len(log.rows) == 3 and np.all(np.isfinite(log.column("total")))
    assert log.smoothed("points", 2).shape == (2,)
    after = m.tensors()
    assert any(not np.array_equal(before[k], after[k]) for k in before)


def test_training_rejects_non_finite_loss():
    m = init_model(ModelConfig())
    with torch.no_grad():
        for p in m.parameters():
            p.fill_(float("nan"))
    with pytest.raises((TrainingError, ValueError)):
        train_toy(m, DataConfig(batch_size=1), steps=1)


def test_sample_partition_covers_sequence():
    rng = np.random.default_rng(0)
    for _ in range(20):
        assert sample_partition(7, rng).n_frames == 7


def test_untrained_teacher_is_identity(frames):
    teacher = TeacherModel(ModelConfig(seed=4)).eval()
    prior = torch.randn(6, 16, 16)
    with torch.no_grad():
        assert torch.equal(teacher(frames, prior), prior)
    out = ToyTeacher(teacher)(frames.numpy(), prior.numpy())
    assert np.allclose(out, np.exp(prior.numpy()), rtol=1e-6)


def test_teacher_training_runs():
    model, hist = train_toy_teacher(ModelConfig(), DataConfig(batch_size=1, kinds=("plane",)), steps=2)
    assert len(hist) == 2 and all(np.isfinite(hist))
    clone = TeacherModel(ModelConfig(seed=7))
    clone.load_tensors(model.tensors())
    assert all(torch.equal(a, b) for a, b in zip(clone.state_dict().values(), model.state_dict().values()))
