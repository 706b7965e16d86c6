import pytest
import torch
from torch import nn

from geossl import model as mdl
from geossl.augmentation import B2Config


@pytest.fixture(scope="module")
def bundle():
    b = mdl.build_bundle("desk", reg_dim=6, seed=0)
    b.eval()
    return b


def images(n, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, 32, 32, generator=g)


class TestEncode:
    def test_dims(self, bundle):
        with torch.no_grad():
            lat = bundle.encode(images(3))
        assert lat.shape == (3, 128) and bundle.p == 128
        assert bundle.project(lat).shape == (3, 64)
        assert bundle.regress(lat, lat.flip(0)).shape == (3, 6)

    def test_single_vs_batch(self, bundle):
        x = images(8)
        with torch.no_grad():
            full = bundle.encode(x)
            single = bundle.encode(x[3:4])
        torch.testing.assert_close(single[0], full[3], atol=1e-6, rtol=0)

    def test_permutation_equivariant(self, bundle):
        x = images(6, 1)
        perm = torch.tensor([5, 2, 0, 1, 4, 3])
        with torch.no_grad():
            torch.testing.assert_close(bundle.encode(x[perm]), bundle.encode(x)[perm], atol=1e-6, rtol=0)

    def test_duplicated_row(self, bundle):
        x = images(2, 2)
        with torch.no_grad():
            out = bundle.encode(torch.cat([x, x[:1]]))
        torch.testing.assert_close(out[2], out[0], atol=1e-6, rtol=0)

    def test_deterministic_eval(self, bundle):
        x = images(4, 3)
        with torch.no_grad():
            assert torch.equal(bundle.encode(x), bundle.encode(x))

    def test_wrong_shape(self, bundle):
        with pytest.raises(mdl.ShapeError):
            bundle.encode(torch.zeros(2, 1, 32, 32))
        with pytest.raises(mdl.ShapeError):
            bundle.project(torch.zeros(2, 7))


class TestHeads:
    def test_two_layer_mlps(self, bundle):
        for head in (bundle.projector, bundle.regressor):
            kinds = [type(m) for m in head]
            assert kinds == [nn.Linear, nn.ReLU, nn.Linear]

    def test_zero_difference_gives_bias_response(self, bundle):
        lat = torch.randn(5, 128)
        with torch.no_grad():
            out = bundle.regress(lat, lat.clone())
            h = bundle.regressor
            bias_response = h[2](torch.relu(h[0].bias))
        for row in out:
            torch.testing.assert_close(row, bias_response)

    @pytest.mark.parametrize("mode,m", [("affine", 6), ("homography", 8), ("rotation", 1), ("shear", 2)])
    def test_head_width_follows_mode(self, mode, m):
        b = mdl.build_bundle("desk", reg_dim=B2Config(mode=mode).dim, seed=0)
        assert b.regressor[-1].out_features == m
        ref = mdl.build_bundle("desk", reg_dim=6, seed=0)
        for (n1, p1), (n2, p2) in zip(b.encoder.named_parameters(), ref.encoder.named_parameters()):
            assert p1.shape == p2.shape
        for p1, p2 in zip(b.projector.parameters(), ref.projector.parameters()):
            assert p1.shape == p2.shape

    def test_concat_input(self):
        b = mdl.build_bundle("desk", reg_dim=6, regressor_input="concat", seed=0)
        assert b.regressor[0].in_features == 2 * b.p
        a, c = torch.randn(2, b.p), torch.randn(2, b.p)
        torch.testing.assert_close(b.regression_input(a, c), torch.cat([a, c], 1))

    def test_on_g_input(self):
        b = mdl.build_bundle("desk", reg_dim=6, placement="on_g", seed=0)
        assert b.regressor[0].in_features == b.k

    def test_regressor_does_not_change_backbone_init(self):
        plain = mdl.build_bundle("desk", reg_dim=None, seed=4)
        with_h = mdl.build_bundle("desk", reg_dim=6, seed=4)
        for p1, p2 in zip(plain.encoder.parameters(), with_h.encoder.parameters()):
            assert torch.equal(p1, p2)
        for p1, p2 in zip(plain.projector.parameters(), with_h.projector.parameters()):
            assert torch.equal(p1, p2)

    def test_no_head(self):
        with pytest.raises(ValueError):
            mdl.build_bundle("desk", reg_dim=None, seed=0).regress(torch.zeros(1, 128), torch.zeros(1, 128))

    def test_finite_difference_on_h(self):
        torch.manual_seed(0)
        h = mdl.mlp(4, 5, 3).double()
        x = torch.randn(6, 4, dtype=torch.float64)
        y = torch.randn(6, 3, dtype=torch.float64)

        def loss():
            return ((h(x) - y) ** 2).mean()

        h.zero_grad()
        loss().backward()
        eps = 1e-6
        for param in h.parameters():
            numeric = torch.zeros_like(param)
            flat = param.data.view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = loss().item()
                flat[i] = orig - eps
                down = loss().item()
                flat[i] = orig
                numeric.view(-1)[i] = (up - down) / (2 * eps)
            rel = (param.grad - numeric).norm() / numeric.norm()
            assert rel < 1e-4


class TestEMA:
    def params(self, seed, shapes=((3, 2), (4,))):
        g = torch.Generator().manual_seed(seed)
        return [torch.randn(*s, generator=g) for s in shapes]

    def test_tau_one(self):
        t, o = self.params(0), self.params(1)
        before = [x.clone() for x in t]
        mdl.ema_update(t, o, 1.0)
        for a, b in zip(t, before):
            assert torch.equal(a, b)

    def test_tau_zero(self):
        t, o = self.params(0), self.params(1)
        mdl.ema_update(t, o, 0.0)
        for a, b in zip(t, o):
            assert torch.equal(a, b)

    def test_elementwise(self):
        t, o = self.params(0), self.params(1)
        expect = [0.9 * a + 0.1 * b for a, b in zip(t, o)]
        mdl.ema_update(t, o, 0.9)
        for a, b in zip(t, expect):
            torch.testing.assert_close(a, b)

    def test_geometric_decay(self):
        t = [x.double() for x in self.params(0)]
        o = [x.double() for x in self.params(1)]
        gap0 = [a - b for a, b in zip(t, o)]
        tau, k = 0.8, 15
        for _ in range(k):
            mdl.ema_update(t, o, tau)
        for a, b, g in zip(t, o, gap0):
            torch.testing.assert_close(a - b, g * tau**k, atol=1e-12, rtol=1e-10)

    def test_structure_mismatch(self):
        with pytest.raises(mdl.ShapeError):
            mdl.ema_update(self.params(0), self.params(1)[:1], 0.5)
        with pytest.raises(mdl.ShapeError):
            mdl.ema_update(self.params(0), self.params(1, ((2, 3), (4,))), 0.5)

    def test_bad_tau(self):
        with pytest.raises(ValueError):
            mdl.ema_update(self.params(0), self.params(1), 1.5)


class TestBYOLBundle:
    def test_target_is_copy_without_grad(self):
        b = mdl.build_bundle("desk", reg_dim=6, byol=True, seed=0)
        assert b.predictor is not None
        assert all(not p.requires_grad for p in b.target_parameters())
        for t, o in zip(b.target_parameters(), b.target_source_parameters()):
            assert torch.equal(t, o) and t.data_ptr() != o.data_ptr()
        online_ids = {id(p) for p in b.online_parameters()}
        assert not online_ids & {id(p) for p in b.target_parameters()}

    def test_gradient_flow(self):
        from geossl import objectives as obj

        b = mdl.build_bundle("desk", reg_dim=6, byol=True, seed=0)
        b.train()
        x1, x2, x1p = images(4, 0), images(4, 1), images(4, 2)
        target_before = [p.clone() for p in b.target_parameters()]
        online_before = [p.clone() for p in b.online_parameters()]
        opt = torch.optim.SGD(b.online_parameters(), lr=0.1)
        lat = b.encode(torch.cat([x1, x2]))
        p = b.predictor(b.project(lat))
        with torch.no_grad():
            t = b.target_projector(b.encode_target(torch.cat([x1, x2])))
        loss = obj.symmetric_byol_loss(p[:4], p[4:], t[:4], t[4:])
        loss = loss + obj.param_regression_loss(b.regress(lat[:4], b.encode(x1p)), torch.rand(4, 6))
        opt.zero_grad()
        loss.backward()
        opt.step()
        for a, c in zip(b.target_parameters(), target_before):
            assert torch.equal(a, c)
        changed = {name: not torch.equal(p, q) for (name, p), q in zip(
            [(n, p) for n, p in b.named_parameters() if not n.startswith("target_")], online_before)}
        for prefix in ("encoder", "projector", "predictor", "regressor"):
            assert any(v for n, v in changed.items() if n.startswith(prefix)), prefix


def test_paper_preset_builds_resnet():
    pytest.importorskip("torchvision")
    b = mdl.build_bundle("paper", reg_dim=6, seed=0)
    assert b.p == 2048


def test_unknown_preset():
    with pytest.raises(ValueError):
        mdl.build_bundle("huge")

