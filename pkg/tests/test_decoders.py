import math

import pytest
import torch

from ptinet.config import DecoderConfig
from ptinet.decoders import IntentionDecoder, TrajectoryDecoder
from ptinet.encoders import ShapeError, init_uniform

H = 12


def _inputs(batch=2):
    g = torch.Generator().manual_seed(0)
    return torch.randn(batch, H, generator=g), torch.tensor([[10.0, 10.0, 5.0, 5.0]] * batch)


def test_zero_head_repeats_last_box():
    dec = init_uniform(TrajectoryDecoder(H), 0.5)
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
    F, last = _inputs()
    out = dec(F, last, 4)
    assert out.shape == (2, 4, 4)
    assert torch.equal(out, last.unsqueeze(1).expand(-1, 4, -1))


def test_constant_offset_accumulates():
    dec = init_uniform(TrajectoryDecoder(H), 0.5)
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.copy_(torch.tensor([1.0, 0.0, 0.0, 0.0]))
    F, last = _inputs(1)
    out = dec(F, last, 3)
    torch.testing.assert_close(out[0, :, 0], torch.tensor([11.0, 12.0, 13.0]))
    torch.testing.assert_close(out[0, :, 1:], torch.tensor([[10.0, 5.0, 5.0]] * 3))


def test_rollout_prefix_consistency():
    dec = init_uniform(TrajectoryDecoder(H), 0.5)
    F, last = _inputs()
    torch.testing.assert_close(dec(F, last, 1)[:, 0], dec(F, last, 3)[:, 0])
    torch.testing.assert_close(dec(F, last, 3), dec(F, last, 7)[:, :3])


def test_absolute_output_mode():
    dec = init_uniform(TrajectoryDecoder(H, offset_output=False), 0.5)
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.copy_(torch.tensor([1.0, 2.0, 3.0, 4.0]))
    F, last = _inputs(1)
    torch.testing.assert_close(dec(F, last, 2)[0], torch.tensor([[1.0, 2.0, 3.0, 4.0]] * 2))


def test_width_mismatch():
    F, last = _inputs()
    with pytest.raises(ShapeError):
        TrajectoryDecoder(H + 1)(F, last, 3)
    with pytest.raises(ShapeError):
        IntentionDecoder(H)(F, last[:, :3], 3)


def test_zero_intention_head_half():
    dec = init_uniform(IntentionDecoder(H), 0.5)
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.zero_()
    F, last = _inputs()
    torch.testing.assert_close(dec(F, last, 6), torch.full((2, 6), 0.5))


@pytest.mark.parametrize("a", [-3.0, 0.0, 2.5])
def test_softmax_shift_invariance(a):
    dec = IntentionDecoder(H)
    with torch.no_grad():
        dec.head.weight.zero_()
        dec.head.bias.copy_(torch.tensor([a, a + math.log(3.0)]))
    F, last = _inputs()
    torch.testing.assert_close(dec(F, last, 4), torch.full((2, 4), 0.75))


def test_probabilities_in_range_and_deterministic():
    dec = init_uniform(IntentionDecoder(H), 1.0).eval()
    F, last = _inputs()
    p = dec(F, last, 5)
    assert p.shape == (2, 5)
    assert torch.all((p > 0) & (p < 1))
    assert torch.equal(p, dec(F, last, 5))


def test_intention_input_is_held_box():
    dec = init_uniform(IntentionDecoder(H), 0.5)
    F, last = _inputs()
    held = last.unsqueeze(1).expand(-1, 4, -1)
    torch.testing.assert_close(dec(F, last, 4), dec(F, last, 4, box_inputs=held))
    moved = held + torch.arange(4.0).view(1, 4, 1)
    assert not torch.allclose(dec(F, last, 4), dec(F, last, 4, box_inputs=moved))


def test_coupled_intention_model():
    from ptinet.model import PTINet, collate
    from ptinet.config import EncoderConfig
    from conftest import make_sample

    enc = EncoderConfig(latent_dim=4, lstm_hidden=8, mlp_width=6, convlstm_filters=2, flow_channels=2,
                        gf_img_dim=5, gf_o_dim=3, image_size=(8, 14), convlstm_blocks=1)
    batch = collate([make_sample(seed=i) for i in range(2)])
    for couple in (False, True):
        out = PTINet(enc, DecoderConfig(couple_intention=couple))(batch, 15)
        assert out.boxes.shape == (2, 15, 4) and out.intention_probs.shape == (2, 15)
