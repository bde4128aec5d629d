import pytest
import torch

from qhnet.network import (
    QFARB,
    QDRB,
    QHPDB,
    QConv2d,
    QHNet,
    QHNetConfig,
    count_parameters,
    parameter_breakdown,
    qfarb_forward,
)
from qhnet.qtensor import QTensor


def rand_image(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g)


class TestConfig:
    def test_toy_defaults(self):
        cfg = QHNetConfig.toy()
        assert cfg.base_q_channels == 4 and cfg.blocks_per_scale == 1 and cfg.scales == 3

    def test_round_trip(self):
        cfg = QHNetConfig.toy(use_pt=False)
        assert QHNetConfig.from_dict(cfg.to_dict()) == cfg

    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            QHNetConfig(scales=4)
        with pytest.raises(ValueError):
            QHNetConfig(algebra="complex")
        with pytest.raises(ValueError):
            QHNetConfig.from_dict({"width": 3})


class TestQHNet:
    def test_identity_at_init(self):
        model = QHNet(QHNetConfig.toy()).eval()
        x = rand_image(2, 3, 16, 16)
        with torch.no_grad():
            y = model(x)
        assert torch.equal(y, x)

    @pytest.mark.parametrize("hw", [(4, 4), (8, 32), (64, 64)])
    def test_shapes(self, hw):
        model = QHNet(QHNetConfig.toy()).eval()
        x = rand_image(1, 3, *hw)
        with torch.no_grad():
            assert model(x).shape == x.shape

    @pytest.mark.parametrize("hw", [(12, 16), (2, 2)])
    def test_rejects_bad_dims(self, hw):
        with pytest.raises(ValueError):
            QHNet(QHNetConfig.toy())(rand_image(1, 3, *hw))

    def test_output_in_range(self):
        model = QHNet(QHNetConfig.toy(), seed=3)
        with torch.no_grad():
            model.head.weight.normal_(0, 1.0)
        y = model(rand_image(1, 3, 16, 16))
        assert y.min() >= 0 and y.max() <= 1

    def test_seeded_init_is_deterministic(self):
        a, b = QHNet(QHNetConfig.toy(), seed=5), QHNet(QHNetConfig.toy(), seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_train_eval_modes(self):
        model = QHNet(QHNetConfig.toy())
        assert model.pt_mode() == {"surrogate"}
        model.eval()
        assert model.pt_mode() == {"hard"}

    def test_load_pt_coeffs(self):
        model = QHNet(QHNetConfig.toy())
        model.load_pt_coeffs([0.707, 0.014, 0.008, 0.999, 0.940, 0.940])
        for layer in model.pt_layers():
            assert torch.allclose(layer.coeffs.detach().double(), torch.tensor([0.707, 0.014, 0.008, 0.999, 0.940, 0.940], dtype=torch.float64), atol=1e-7)


class TestParameterEconomy:
    @pytest.mark.parametrize("cin,cout,k", [(1, 1, 1), (2, 3, 3), (4, 4, 3), (8, 2, 5)])
    def test_qconv_is_four_times_smaller(self, cin, cout, k):
        q = QConv2d(cin, cout, k, bias=False)
        real = torch.nn.Conv2d(4 * cin, 4 * cout, k, bias=False)
        assert 4 * count_parameters(q) == count_parameters(real)

    def test_toy_below_thirty_percent_of_real_twin(self):
        q = count_parameters(QHNet(QHNetConfig.toy()))
        r = count_parameters(QHNet(QHNetConfig.toy(algebra="real")))
        assert q / r < 0.30

    def test_breakdown_sums(self):
        b = parameter_breakdown(QHNet(QHNetConfig.toy()))
        assert b["weights"] + b["thresholds"] == b["total"]
        assert b["thresholds"] > 0
        assert parameter_breakdown(QHNet(QHNetConfig.toy(use_pt=False)))["thresholds"] == 0

    def test_ablation_directions(self):
        full = parameter_breakdown(QHNet(QHNetConfig.toy()))["weights"]

        def weights(name):
            return parameter_breakdown(QHNet(QHNetConfig.toy(**{name: False})))["weights"]

        assert weights("use_qhpdb") > full
        assert weights("use_qfarb") < full
        assert weights("use_attention") < full
        assert weights("use_pt") == full


class TestBlocks:
    def test_qhpdb_without_pt_is_linear(self):
        cfg = QHNetConfig.toy(use_pt=False)
        block = QHPDB(cfg, 2).double()
        a, b = torch.randn(1, 8, 8, 8, dtype=torch.float64), torch.randn(1, 8, 8, 8, dtype=torch.float64)
        torch.testing.assert_close(block(a + 2 * b), block(a) + 2 * block(b), rtol=0, atol=1e-12)

    def test_qhpdb_needs_power_of_two(self):
        with pytest.raises(ValueError):
            QHPDB(QHNetConfig.toy(), 1)(torch.randn(1, 4, 6, 8))

    def test_qdrb_shape(self):
        block = QDRB(QHNetConfig.toy(), 2)
        x = torch.randn(2, 8, 8, 8)
        assert block(x).shape == x.shape

    def test_qfarb_is_convex_blend(self):
        block = QFARB(QHNetConfig.toy(), 2).double()
        y = torch.randn(2, 8, 8, 8, dtype=torch.float64)
        m1, m2 = block.maps(y)
        assert torch.all((m2 > 0) & (m2 < 1))
        out = block(y)
        lo, hi = torch.minimum(y, m1.expand_as(y)), torch.maximum(y, m1.expand_as(y))
        assert torch.all(out >= lo - 1e-12) and torch.all(out <= hi + 1e-12)

    def test_qfarb_on_qtensor(self):
        block = QFARB(QHNetConfig.toy(), 2)
        q = QTensor(torch.randn(1, 4, 2, 4, 4))
        assert qfarb_forward(q, block).data.shape == q.data.shape
