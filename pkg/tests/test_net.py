from dataclasses import replace

import pytest
import torch

from rtatl.config import load_config
from rtatl.models.net import CheckpointMismatch, RTATLNet, load_checkpoint, save_checkpoint


@pytest.fixture(scope="module")
def bp4d_net(bp4d_cfg):
    torch.manual_seed(0)
    return RTATLNet(*bp4d_cfg)


def _centers(b, n, size=192, seed=0):
    g = torch.Generator().manual_seed(seed)
    return 40 + (size - 80) * torch.rand(b, n, 2, 2, generator=g)


def test_parameter_counts(bp4d_net):
    inference = bp4d_net.count_parameters("inference")
    train = bp4d_net.count_parameters("train")
    assert inference < train
    assert 16e6 <= inference <= 23e6
    assert 44e6 <= train <= 66e6
    with pytest.raises(ValueError):
        bp4d_net.count_parameters("both")


def test_disfa_has_fewer_branches(bp4d_net):
    disfa = RTATLNet(*load_config("disfa.cfg"))
    assert disfa.count_parameters() < bp4d_net.count_parameters()


def test_inference_never_runs_auxiliary_heads(bp4d_net):
    called = []
    handles = [m.register_forward_pre_hook(lambda mod, args, name=name: called.append(name))
               for name, m in bp4d_net.named_modules()]
    bp4d_net.eval()
    with torch.no_grad():
        pred = bp4d_net(torch.rand(2, 3, 192, 192), _centers(2, 12))
    for h in handles:
        h.remove()
    assert any(n.startswith("trunk") for n in called) and "transformer" in called
    assert not [n for n in called if n.startswith(("roii", "flow_head"))]
    for probs in (pred.probs_global, pred.probs_roi, pred.probs_fused):
        assert probs.shape == (2, 12) and torch.isfinite(probs).all()
        assert ((probs >= 0) & (probs <= 1)).all()
    assert torch.equal(pred.probs_fused, torch.maximum(pred.probs_global, pred.probs_roi))


def test_parameter_groups_partition_the_model(bp4d_net):
    main = {id(p) for p in bp4d_net.main_parameters()}
    critic = {id(p) for p in bp4d_net.critic_parameters()}
    assert not main & critic
    assert main | critic == {id(p) for p in bp4d_net.parameters()}
    assert {id(p) for p in bp4d_net.roii.generator.parameters()} <= main


def test_checkpoint_round_trip_and_refusal(tmp_path, synth_cfg):
    spec, hp = synth_cfg
    torch.manual_seed(0)
    net = RTATLNet(spec, hp)
    path = tmp_path / "ckpt.pt"
    save_checkpoint(path, net, step=7)
    loaded, blob = load_checkpoint(path, spec, hp)
    assert blob["step"] == 7
    for (name, a), (_, b) in zip(net.state_dict().items(), loaded.state_dict().items()):
        assert torch.equal(a, b), name
    other = load_config("bp4d.cfg")
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, *other)
    with pytest.raises(CheckpointMismatch):
        load_checkpoint(path, spec, replace(hp, lambda1=0.2))
