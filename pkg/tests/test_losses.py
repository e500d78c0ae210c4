import numpy as np
import pytest
import torch
import torch.nn.functional as F
from torch import nn

from texterase.data import compose, downsample_image, downsample_mask
from texterase.losses import (
    SCALES,
    TAP_CHANNELS,
    ExtractorError,
    LossError,
    LossWeights,
    RandomFeatureExtractor,
    Vgg16FeatureExtractor,
    build_extractor,
    combined_loss,
    content_loss,
    gram,
    multiscale_regression_loss,
    texture_loss,
    tv_loss,
)


class IdentityTap(nn.Module):
    def forward(self, x):
        return [x]


class AvgTap(nn.Module):
    def forward(self, x):
        return [F.avg_pool2d(x, 2)]


def rand_t(gen, *shape, lo=-0.5, hi=0.5):
    return torch.rand(shape, generator=gen, dtype=torch.float64) * (hi - lo) + lo


def rand_mask_t(gen, b, h, w, p=0.5):
    return (torch.rand((b, 1, h, w), generator=gen, dtype=torch.float64) < p).double()


def separated_pair(gen, shape, margin=0.05, spread=0.35):
    """Random (out, gt) whose pixel differences stay away from zero."""
    gt = rand_t(gen, *shape)
    sign = torch.where(torch.rand(shape, generator=gen) < 0.5, -1.0, 1.0).double()
    mag = margin + torch.rand(shape, generator=gen, dtype=torch.float64) * spread
    return gt + sign * mag, gt


def full_pyramid(gen, b=1, h=8, w=8):
    outs, gts, masks = [], [], []
    for s in SCALES:
        hh, ww = round(h * s), round(w * s)
        out, gt = separated_pair(gen, (b, 3, hh, ww))
        outs.append(out)
        gts.append(gt)
        masks.append(rand_mask_t(gen, b, hh, ww))
    return outs, gts, masks


def finite_difference(fn, x, step=1e-3):
    fd = torch.zeros_like(x)
    flat, out = x.reshape(-1), fd.reshape(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + step
            hi = float(fn(x))
            flat[i] = orig - step
            lo = float(fn(x))
            flat[i] = orig
            out[i] = (hi - lo) / (2 * step)
    return fd


def assert_gradient_matches(fn, x0, rtol=1e-2, step=1e-3):
    x = x0.clone().requires_grad_(True)
    fn(x).backward()
    analytic = x.grad.detach()
    fd = finite_difference(fn, x0.clone(), step)
    scale = max(analytic.abs().max().item(), 1e-8)
    err = (fd - analytic).abs().max().item()
    assert err <= rtol * scale, f"gradient mismatch: {err} vs scale {scale}"


def tiny_extractor(seed=0):
    return RandomFeatureExtractor(seed=seed, widths=(4, 8, 12)).double()


def margin_ok(diffs, threshold):
    """True when no entry sits in the finite-difference danger zone (0, threshold)."""
    a = diffs.abs()
    return not ((a > 0) & (a < threshold)).any()


# Per-tap rejection margins for the tiny extractor, sized ~5x the widest
# kink danger zone (fd step times the measured per-pixel sensitivity of a
# feature / gram-difference element at that depth).
FEAT_MARGINS = (5e-4, 1e-4, 2e-5)
GRAM_MARGINS = (2e-3, 2.5e-4, 2.5e-5)


def taps_margin_ok(pairs, margins):
    return all(margin_ok((a - b).reshape(-1), m)
               for (a, b), m in zip(pairs, margins))


class TestLossWeights:
    def test_defaults(self):
        w = LossWeights()
        assert w.alpha == 6.0
        assert w.lambda_scales == (0.6, 0.8, 1.0)
        assert (w.lambda_e, w.lambda_tex, w.lambda_t) == (0.5, 50.0, 25.0)
        assert w.lambda_adv == 1.0

    def test_rejects_negative(self):
        with pytest.raises(LossError):
            LossWeights(alpha=-1.0)
        with pytest.raises(LossError):
            LossWeights(lambda_tex=-0.1)


class TestMultiscale:
    def test_zero_at_equality(self):
        gen = torch.Generator().manual_seed(0)
        outs, gts, masks = full_pyramid(gen)
        loss = multiscale_regression_loss(gts, gts, masks, LossWeights())
        assert float(loss) == 0.0

    def test_single_scale_text_pixel(self):
        w = LossWeights(lambda_scales=(1.0,))
        out = torch.tensor([[[[0.5]]]])
        gt = torch.zeros(1, 1, 1, 1)
        one = torch.ones(1, 1, 1, 1)
        loss = multiscale_regression_loss([out], [gt], [one], w)
        assert float(loss) == pytest.approx(0.5)

    def test_single_scale_non_text_pixel(self):
        w = LossWeights(lambda_scales=(1.0,))
        out = torch.tensor([[[[0.5]]]])
        gt = torch.zeros(1, 1, 1, 1)
        zero = torch.zeros(1, 1, 1, 1)
        loss = multiscale_regression_loss([out], [gt], [zero], w)
        assert float(loss) == pytest.approx(3.0)

    def test_scale_count_mismatch(self):
        gen = torch.Generator().manual_seed(1)
        outs, gts, masks = full_pyramid(gen)
        with pytest.raises(LossError):
            multiscale_regression_loss(outs[:2], gts[:2], masks[:2], LossWeights())

    def test_shape_mismatch(self):
        gen = torch.Generator().manual_seed(2)
        outs, gts, masks = full_pyramid(gen)
        gts[0] = gts[0][..., :-1]
        with pytest.raises(LossError):
            multiscale_regression_loss(outs, gts, masks, LossWeights())

    def test_gradient(self):
        gen = torch.Generator().manual_seed(3)
        w = LossWeights()
        for _ in range(3):
            outs, gts, masks = full_pyramid(gen)
            for k in range(len(SCALES)):
                def fn(x, k=k):
                    trial = list(outs)
                    trial[k] = x
                    return multiscale_regression_loss(trial, gts, masks, w)

                assert_gradient_matches(fn, outs[k])


class TestContent:
    def test_zero_at_equality(self):
        gen = torch.Generator().manual_seed(4)
        fx = tiny_extractor()
        gt = rand_t(gen, 1, 3, 8, 8)
        assert float(content_loss(gt, gt, gt, fx)) == 0.0

    def test_avg_tap_hand_case(self):
        out = torch.ones(1, 3, 4, 4)
        gt = torch.zeros(1, 3, 4, 4)
        loss = content_loss(out, gt, gt, AvgTap())
        assert float(loss) == pytest.approx(1.0)

    def test_non_negative(self):
        gen = torch.Generator().manual_seed(5)
        fx = tiny_extractor()
        for _ in range(5):
            args = [rand_t(gen, 1, 3, 8, 8) for _ in range(3)]
            assert float(content_loss(*args, fx)) >= 0.0

    def test_gradient(self):
        gen = torch.Generator().manual_seed(6)
        fx = tiny_extractor(seed=1)
        done = 0
        for _ in range(60):
            out, gt = separated_pair(gen, (1, 3, 8, 8))
            comp = rand_t(gen, 1, 3, 8, 8)
            with torch.no_grad():
                pairs = list(zip(fx(out), fx(gt)))
            if not taps_margin_ok(pairs, FEAT_MARGINS):
                continue
            assert_gradient_matches(lambda x: content_loss(x, comp, gt, fx), out)
            done += 1
            if done == 3:
                break
        assert done == 3, "could not find enough kink-free draws"


class TestGram:
    def test_zero(self):
        assert torch.equal(gram(torch.zeros(2, 3, 3)), torch.zeros(2, 2))

    def test_hand_case(self):
        act = torch.tensor([1.0, 2.0, 2.0]).reshape(1, 1, 3)
        assert torch.equal(gram(act), torch.tensor([[9.0]]))

    def test_symmetric_psd(self):
        gen = torch.Generator().manual_seed(7)
        for _ in range(10):
            act = rand_t(gen, 2, 5, 4, 4)
            g = gram(act)
            assert g.shape == (2, 5, 5)
            assert torch.allclose(g, g.transpose(1, 2))
            x = rand_t(gen, 2, 5, 1)
            quad = torch.bmm(x.transpose(1, 2), torch.bmm(g, x))
            assert (quad >= -1e-9).all()

    def test_batched_matches_single(self):
        gen = torch.Generator().manual_seed(8)
        act = rand_t(gen, 3, 4, 6, 6)
        g = gram(act)
        for i in range(3):
            assert torch.allclose(g[i], gram(act[i]))


class TestTexture:
    def test_zero_at_equality(self):
        gen = torch.Generator().manual_seed(9)
        fx = tiny_extractor()
        gt = rand_t(gen, 1, 3, 8, 8)
        assert float(texture_loss(gt, gt, gt, fx)) == 0.0

    def test_hand_case_single_site(self):
        out = torch.full((1, 1, 1, 1), 2.0)
        gt = torch.ones(1, 1, 1, 1)
        loss = texture_loss(out, gt, gt, IdentityTap())
        assert float(loss) == pytest.approx(3.0)

    def test_spatial_permutation_invariance(self):
        gen = torch.Generator().manual_seed(10)
        fx = IdentityTap()
        out, comp, gt = (rand_t(gen, 1, 3, 4, 4) for _ in range(3))
        base = float(texture_loss(out, comp, gt, fx))
        perm = torch.randperm(16, generator=gen)

        def shuffle(t):
            return t.reshape(1, 3, -1)[..., perm].reshape(1, 3, 4, 4)

        permuted = float(texture_loss(shuffle(out), shuffle(comp), shuffle(gt), fx))
        assert permuted == pytest.approx(base, rel=1e-12)

    def test_gradient(self):
        gen = torch.Generator().manual_seed(11)
        fx = tiny_extractor(seed=2)
        done = 0
        for _ in range(100):
            out, gt = separated_pair(gen, (1, 3, 8, 8))
            comp = rand_t(gen, 1, 3, 8, 8)
            with torch.no_grad():
                pairs = [(gram(a), gram(g)) for a, g in zip(fx(out), fx(gt))]
            if not taps_margin_ok(pairs, GRAM_MARGINS):
                continue
            assert_gradient_matches(lambda x: texture_loss(x, comp, gt, fx), out)
            done += 1
            if done == 3:
                break
        assert done == 3, "could not find enough kink-free draws"


class TestTv:
    def test_constant_zero(self):
        assert float(tv_loss(torch.full((1, 3, 5, 5), 0.7))) == 0.0

    def test_hand_case(self):
        x = torch.tensor([[0.0, 1.0], [0.0, 1.0]]).reshape(1, 1, 2, 2)
        # raw neighbor-difference sum is 2 over 4 pairs
        assert float(tv_loss(x)) == pytest.approx(0.5)

    def test_complement_symmetry(self):
        gen = torch.Generator().manual_seed(12)
        for _ in range(5):
            x = rand_t(gen, 1, 3, 6, 6, lo=0.0, hi=1.0)
            assert float(tv_loss(x)) == pytest.approx(float(tv_loss(1.0 - x)))

    def test_resolution_normalization(self):
        # a constant-gradient ramp has the same per-pair loss at any size
        for n in (4, 8):
            ramp = torch.arange(n, dtype=torch.float64).repeat(n, 1) / n
            x = ramp.reshape(1, 1, n, n)
            assert float(tv_loss(x)) == pytest.approx((1 / n) * (n * (n - 1)) /
                                                      ((n - 1) * n + n * (n - 1)))

    def test_gradient(self):
        gen = torch.Generator().manual_seed(13)
        checker = (torch.arange(8).reshape(-1, 1) + torch.arange(8)) % 2
        base = (checker.double() - 0.5) * 0.6
        for _ in range(5):
            x = base.expand(1, 3, 8, 8) + rand_t(gen, 1, 3, 8, 8, lo=-0.1, hi=0.1)
            assert_gradient_matches(tv_loss, x)


class TestCombined:
    def build_case(self, gen, h=8, w=8):
        gt = rand_t(gen, 1, 3, h, w)
        mask = rand_mask_t(gen, 1, h, w)
        outs = [rand_t(gen, 1, 3, round(h * s), round(w * s)) for s in SCALES]
        return outs, gt, mask

    def test_zero_at_equality(self):
        # tv penalizes the raw output, so a fully zero total needs a flat target
        gen = torch.Generator().manual_seed(14)
        gt = torch.full((1, 3, 8, 8), 0.3, dtype=torch.float64)
        mask = rand_mask_t(gen, 1, 8, 8)
        outs = [downsample_image(gt, s) for s in SCALES]
        br = combined_loss(outs, gt, mask, 0.0, tiny_extractor())
        assert float(br.total) == pytest.approx(0.0, abs=1e-12)
        for term in (br.multiscale, br.content, br.texture, br.tv):
            assert float(term) == pytest.approx(0.0, abs=1e-12)

    def test_equality_leaves_only_tv(self):
        gen = torch.Generator().manual_seed(14)
        w = LossWeights()
        gt = rand_t(gen, 1, 3, 8, 8)
        mask = rand_mask_t(gen, 1, 8, 8)
        outs = [downsample_image(gt, s) for s in SCALES]
        br = combined_loss(outs, gt, mask, 0.0, tiny_extractor(), w)
        for term in (br.multiscale, br.content, br.texture):
            assert float(term) == pytest.approx(0.0, abs=1e-12)
        assert float(br.tv) > 0.0
        assert float(br.total) == pytest.approx(w.lambda_t * float(br.tv), rel=1e-12)

    def test_total_linearity(self):
        gen = torch.Generator().manual_seed(15)
        fx = tiny_extractor()
        outs, gt, mask = self.build_case(gen)
        w = LossWeights()
        br = combined_loss(outs, gt, mask, 0.25, fx, w)
        want = (float(br.multiscale) + w.lambda_e * float(br.content)
                + w.lambda_tex * float(br.texture) + w.lambda_t * float(br.tv)
                + w.lambda_adv * float(br.adversarial))
        assert float(br.total) == pytest.approx(want, rel=1e-9)

    def test_doubling_lambda_e(self):
        gen = torch.Generator().manual_seed(16)
        fx = tiny_extractor()
        outs, gt, mask = self.build_case(gen)
        w1 = LossWeights()
        w2 = LossWeights(lambda_e=2 * w1.lambda_e)
        b1 = combined_loss(outs, gt, mask, 0.0, fx, w1)
        b2 = combined_loss(outs, gt, mask, 0.0, fx, w2)
        assert float(b2.total - b1.total) == pytest.approx(
            w1.lambda_e * float(b1.content), rel=1e-9
        )
        assert float(b1.content) == pytest.approx(float(b2.content))

    def test_non_negative_terms(self):
        gen = torch.Generator().manual_seed(17)
        fx = tiny_extractor()
        for _ in range(5):
            outs, gt, mask = self.build_case(gen)
            br = combined_loss(outs, gt, mask, 0.0, fx)
            for term in (br.multiscale, br.content, br.texture, br.tv):
                assert float(term) >= 0.0

    def test_perturbation_outside_mask_spares_comp_terms(self):
        gen = torch.Generator().manual_seed(18)
        fx = tiny_extractor()
        outs, gt, mask = self.build_case(gen)
        out = outs[-1]
        comp = compose(out, gt, mask)

        bumped = out + 0.3 * (1.0 - mask)
        comp2 = compose(bumped, gt, mask)
        assert torch.equal(comp2, comp)

        def comp_terms(c):
            content = sum(float((fc - fg).abs().mean())
                          for fc, fg in zip(fx(c), fx(gt)))
            texture = sum(
                float((gram(fc) - gram(fg)).abs().sum())
                for fc, fg in zip(fx(c), fx(gt))
            )
            return content, texture

        assert comp_terms(comp2) == comp_terms(comp)
        out_term = sum(float((fa - fg).abs().mean()) for fa, fg in zip(fx(out), fx(gt)))
        bumped_term = sum(float((fa - fg).abs().mean()) for fa, fg in zip(fx(bumped), fx(gt)))
        assert bumped_term != out_term

    def test_perturbation_inside_mask_propagates_to_comp(self):
        gen = torch.Generator().manual_seed(19)
        outs, gt, mask = self.build_case(gen)
        bumped = outs[-1] + 0.3 * mask
        comp = compose(bumped, gt, mask)
        assert torch.equal(comp * mask, bumped * mask)
        assert torch.equal(comp * (1 - mask), gt * (1 - mask))

    def test_gradient_full_scale_directional(self):
        # directional fd with a majority vote: a stray kink can corrupt one
        # probe direction, a wrong analytic gradient corrupts them all
        gen = torch.Generator().manual_seed(20)
        fx = tiny_extractor(seed=3)
        outs, gt, mask = self.build_case(gen)

        def fn(x):
            return combined_loss(outs[:-1] + [x], gt, mask, 0.0, fx).total

        x0 = outs[-1]
        x = x0.clone().requires_grad_(True)
        fn(x).backward()
        analytic = x.grad.detach()

        step = 1e-3
        good = 0
        for _ in range(7):
            v = torch.randn(x0.shape, generator=gen, dtype=torch.float64)
            v /= v.norm()
            with torch.no_grad():
                hi = float(fn(x0 + step * v))
                lo = float(fn(x0 - step * v))
            fd = (hi - lo) / (2 * step)
            want = float((analytic * v).sum())
            scale = max(abs(want), analytic.norm().item() / v.numel() ** 0.5, 1e-8)
            if abs(fd - want) <= 1e-2 * scale:
                good += 1
        assert good >= 6, f"directional gradient checks: {good}/7 matched"

    def test_gradient_decomposes_over_terms(self):
        # the masked composition path and the term weighting carry the
        # gradient: total's grad must equal the weighted sum of per-term grads
        gen = torch.Generator().manual_seed(21)
        fx = tiny_extractor(seed=4)
        w = LossWeights(lambda_adv=0.0)
        outs, gt, mask = self.build_case(gen)

        def grad_of(fn):
            x = outs[-1].clone().requires_grad_(True)
            fn(x).backward()
            return x.grad.detach()

        gts = [downsample_image(gt, s) for s in SCALES]
        masks = [mask if s == 1.0 else downsample_mask(mask, s) for s in SCALES]

        g_total = grad_of(lambda x: combined_loss(outs[:-1] + [x], gt, mask, 0.0, fx, w).total)
        g_ms = grad_of(lambda x: multiscale_regression_loss(outs[:-1] + [x], gts, masks, w))
        g_c = grad_of(lambda x: content_loss(x, compose(x, gt, mask), gt, fx))
        g_t = grad_of(lambda x: texture_loss(x, compose(x, gt, mask), gt, fx))
        g_tv = grad_of(tv_loss)

        want = g_ms + w.lambda_e * g_c + w.lambda_tex * g_t + w.lambda_t * g_tv
        assert torch.allclose(g_total, want, atol=1e-12)


class TestRandomFeatureExtractor:
    def test_tap_shapes(self):
        fx = RandomFeatureExtractor(seed=0)
        taps = fx(torch.zeros(1, 3, 16, 16))
        shapes = [tuple(t.shape) for t in taps]
        assert shapes == [(1, 64, 8, 8), (1, 128, 4, 4), (1, 256, 2, 2)]
        assert tuple(t.shape[1] for t in taps) == TAP_CHANNELS

    def test_deterministic_across_instances(self):
        gen = torch.Generator().manual_seed(21)
        x = rand_t(gen, 1, 3, 8, 8).float()
        a = RandomFeatureExtractor(seed=5)(x)
        b = RandomFeatureExtractor(seed=5)(x)
        for ta, tb in zip(a, b):
            assert torch.equal(ta, tb)
        c = RandomFeatureExtractor(seed=6)(x)
        assert not torch.equal(a[0], c[0])

    def test_frozen(self):
        fx = RandomFeatureExtractor()
        assert all(not p.requires_grad for p in fx.parameters())

    def test_build_extractor(self):
        assert isinstance(build_extractor("toy"), RandomFeatureExtractor)
        with pytest.raises(LossError):
            build_extractor("mystery")


def fake_vgg16_state():
    gen = torch.Generator().manual_seed(22)
    shapes = {
        0: (64, 3), 2: (64, 64), 5: (128, 64), 7: (128, 128),
        10: (256, 128), 12: (256, 256), 14: (256, 256),
    }
    state = {}
    for idx, (out_c, in_c) in shapes.items():
        state[f"features.{idx}.weight"] = torch.randn(
            (out_c, in_c, 3, 3), generator=gen) * 0.05
        state[f"features.{idx}.bias"] = torch.zeros(out_c)
    # layers past the third pooling stage must be ignored by the loader
    state["features.17.weight"] = torch.randn((512, 256, 3, 3), generator=gen)
    state["classifier.0.weight"] = torch.zeros(2, 2)
    return state


def sha_prefix(path, n=8):
    import hashlib

    return hashlib.sha256(path.read_bytes()).hexdigest()[:n]


class TestVgg16FeatureExtractor:
    def test_missing_file(self, tmp_path):
        with pytest.raises(ExtractorError):
            Vgg16FeatureExtractor(tmp_path / "absent.pth")

    def test_checksum_mismatch(self, tmp_path):
        p = tmp_path / "junk.pth"
        torch.save(fake_vgg16_state(), p)
        with pytest.raises(ExtractorError, match="sha256"):
            Vgg16FeatureExtractor(p)

    def test_loads_verified_file(self, tmp_path):
        p = tmp_path / "weights.pth"
        torch.save(fake_vgg16_state(), p)
        fx = Vgg16FeatureExtractor(p, expected_sha256_prefix=sha_prefix(p))
        taps = fx(torch.zeros(1, 3, 32, 32))
        assert [tuple(t.shape) for t in taps] == [
            (1, 64, 16, 16), (1, 128, 8, 8), (1, 256, 4, 4)
        ]
        assert all(not p_.requires_grad for p_ in fx.parameters())

    def test_rejects_wrong_shapes(self, tmp_path):
        state = fake_vgg16_state()
        state["features.0.weight"] = torch.zeros(64, 4, 3, 3)
        p = tmp_path / "bad.pth"
        torch.save(state, p)
        with pytest.raises(ExtractorError, match="does not fit"):
            Vgg16FeatureExtractor(p, expected_sha256_prefix=sha_prefix(p))

    def test_env_var_path(self, tmp_path, monkeypatch):
        p = tmp_path / "weights.pth"
        torch.save(fake_vgg16_state(), p)
        monkeypatch.setenv("TEXTERASE_VGG16_WEIGHTS", str(p))
        fx = Vgg16FeatureExtractor(expected_sha256_prefix=sha_prefix(p))
        assert len(fx(torch.zeros(1, 3, 16, 16))) == 3
