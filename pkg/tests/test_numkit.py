import pytest
param = pytest.mark.parametrize

import torch

def brute_force_conv(x, w, b, stride):
    batch, channels, height, width = x.shape
    filters, _, kh, kw = w.shape

    out_h = (height - kh) // stride + 1
    out_w = (width - kw) // stride + 1

    out = torch.zeros(batch, filters, out_h, out_w, dtype = x.dtype)

    for n in range(batch):
        for f in range(filters):
            for i in range(out_h):
                for j in range(out_w):
                    acc = b[f].clone()

                    for c in range(channels):
                        for u in range(kh):
                            for v in range(kw):
                                acc += x[n, c, i * stride + u, j * stride + v] * w[f, c, u, v]

                    out[n, f, i, j] = acc

    return out

def test_conv_all_ones_kernel_sums_input():
    from metastasis_ewc_pytorch.numkit import conv2d_valid

    x = torch.randn(1, 1, 7, 7, dtype = torch.float64)
    out = conv2d_valid(x, torch.ones(1, 1, 7, 7, dtype = torch.float64), torch.zeros(1, dtype = torch.float64))

    assert out.shape == (1, 1, 1, 1)
    assert torch.allclose(out.flatten(), x.sum().reshape(1))

def test_conv_stem_extent():
    from metastasis_ewc_pytorch.numkit import conv2d_valid, valid_extent

    out = conv2d_valid(torch.randn(1, 1, 279, 279), torch.randn(1, 1, 7, 7), stride = 2)

    assert out.shape == (1, 1, 137, 137)
    assert valid_extent(279, 7, 2) == 137

@param('stride', (1, 2))
def test_conv_matches_loops(stride):
    from metastasis_ewc_pytorch.numkit import conv2d_valid

    gen = torch.Generator().manual_seed(stride)

    x = torch.randn(2, 3, 9, 9, generator = gen, dtype = torch.float64)
    w = torch.randn(4, 3, 3, 3, generator = gen, dtype = torch.float64)
    b = torch.randn(4, generator = gen, dtype = torch.float64)

    assert torch.allclose(conv2d_valid(x, w, b, stride = stride), brute_force_conv(x, w, b, stride), atol = 1e-6)

def test_conv_dimension_errors():
    from metastasis_ewc_pytorch.numkit import conv2d_valid
    from metastasis_ewc_pytorch.errors import DimensionError

    with pytest.raises(DimensionError):
        conv2d_valid(torch.randn(1, 2, 9, 9), torch.randn(4, 3, 3, 3))

    with pytest.raises(DimensionError):
        conv2d_valid(torch.randn(1, 3, 2, 2), torch.randn(4, 3, 3, 3))

    with pytest.raises(DimensionError):
        conv2d_valid(torch.randn(3, 9, 9), torch.randn(4, 3, 3, 3))

@param('seed', range(20))
def test_layer_gradients_against_finite_differences(seed):
    import torch.nn.functional as F
    from torch.autograd import gradcheck
    from metastasis_ewc_pytorch.numkit import conv2d_valid, crop_concat, channel_softmax

    gen = torch.Generator().manual_seed(seed)

    def rand(*shape):
        return torch.randn(*shape, generator = gen, dtype = torch.float64, requires_grad = True)

    stride = 1 + (seed % 2)

    x, w, b = rand(2, 3, 8, 8), rand(4, 3, 3, 3), rand(4)
    assert gradcheck(lambda x, w, b: conv2d_valid(x, w, b, stride = stride), (x, w, b), eps = 1e-5, atol = 1e-6, rtol = 1e-4)

    scale, shift = rand(3), rand(3)
    assert gradcheck(lambda x, s, t: F.batch_norm(x, None, None, s, t, training = True, eps = 1e-5), (rand(4, 3, 5, 5), scale, shift), eps = 1e-5, atol = 1e-6, rtol = 1e-4)

    assert gradcheck(lambda x: F.relu(x), (rand(2, 3, 5, 5),), eps = 1e-5, atol = 1e-6, rtol = 1e-4)
    assert gradcheck(lambda x: F.max_pool2d(x, 3, stride = 2), (rand(1, 2, 9, 9),), eps = 1e-6, atol = 1e-6, rtol = 1e-4)
    assert gradcheck(lambda x: F.avg_pool2d(x, 2, stride = 2), (rand(1, 2, 8, 8),), eps = 1e-5, atol = 1e-6, rtol = 1e-4)
    assert gradcheck(crop_concat, (rand(1, 2, 7, 7), rand(1, 3, 5, 5)), eps = 1e-5, atol = 1e-6, rtol = 1e-4)
    assert gradcheck(channel_softmax, (rand(2, 2, 3, 3),), eps = 1e-5, atol = 1e-6, rtol = 1e-4)

def test_batch_norm_inference_is_affine():
    from metastasis_ewc_pytorch.numkit import batch_norm, BATCH_NORM_EPS

    gen = torch.Generator().manual_seed(3)
    norm = batch_norm(4).double().eval()

    with torch.no_grad():
        norm.running_mean.copy_(torch.randn(4, generator = gen, dtype = torch.float64))
        norm.running_var.copy_(torch.rand(4, generator = gen, dtype = torch.float64) + 0.5)
        norm.weight.copy_(torch.randn(4, generator = gen, dtype = torch.float64))
        norm.bias.copy_(torch.randn(4, generator = gen, dtype = torch.float64))

        x = torch.randn(2, 4, 5, 5, generator = gen, dtype = torch.float64)

        scale = norm.weight / (norm.running_var + BATCH_NORM_EPS).sqrt()
        shift = norm.bias - norm.running_mean * scale

        expected = x * scale[:, None, None] + shift[:, None, None]
        assert torch.allclose(norm(x), expected, atol = 1e-12)

        # doubling the input moves the output by the per-channel scale times the input

        assert torch.allclose(norm(2 * x) - norm(x), x * scale[:, None, None], atol = 1e-12)

@param('kernel', (2, 3))
def test_avg_pool_gradient(kernel):
    from torch import nn

    x = torch.randn(1, 2, 4 * kernel, 4 * kernel, dtype = torch.float64, requires_grad = True)

    nn.AvgPool2d(kernel, stride = kernel)(x).backward(torch.ones(1, 2, 4, 4, dtype = torch.float64))

    assert torch.equal(x.grad, torch.full_like(x, 1. / kernel ** 2))

def test_central_difference_on_loss():
    from metastasis_ewc_pytorch.numkit import cross_entropy_l2, backward, conv2d_valid, channel_softmax

    gen = torch.Generator().manual_seed(1)

    x = torch.randn(3, 2, 3, 3, generator = gen, dtype = torch.float64)
    labels = torch.tensor([0, 1, 1])
    w = torch.randn(2, 2, 3, 3, generator = gen, dtype = torch.float64, requires_grad = True)

    def loss_fn(weights):
        return cross_entropy_l2(channel_softmax(conv2d_valid(x, weights)), labels, [weights], 1e-2)

    analytic = backward(loss_fn(w), dict(w = w))['w']

    h = 1e-5
    numeric = torch.zeros_like(w)

    with torch.no_grad():
        for index in range(w.numel()):
            bump = torch.zeros(w.numel(), dtype = torch.float64)
            bump[index] = h
            bump = bump.reshape(w.shape)
            numeric.view(-1)[index] = (loss_fn(w + bump) - loss_fn(w - bump)) / (2 * h)

    relative = (analytic - numeric).abs().max() / numeric.abs().max()
    assert relative < 1e-4

def test_backward_linear_closed_form():
    from metastasis_ewc_pytorch.numkit import backward

    gen = torch.Generator().manual_seed(2)

    x = torch.randn(5, 3, generator = gen, dtype = torch.float64)
    y = torch.randn(5, 1, generator = gen, dtype = torch.float64)
    w = torch.randn(3, 1, generator = gen, dtype = torch.float64, requires_grad = True)

    loss = (x @ w - y).square().sum()
    grads = backward(loss, dict(w = w))

    assert torch.allclose(grads['w'], 2 * x.t() @ (x @ w.detach() - y))

def test_backward_zero_upstream_and_unused():
    from metastasis_ewc_pytorch.numkit import backward

    w = torch.randn(3, requires_grad = True)
    unused = torch.randn(2, requires_grad = True)

    out = w * 2.
    grads = backward(out, dict(w = w, unused = unused), loss_grad = torch.zeros(3))

    assert torch.equal(grads['w'], torch.zeros(3))
    assert torch.equal(grads['unused'], torch.zeros(2))

def test_backward_before_forward():
    from metastasis_ewc_pytorch.numkit import backward
    from metastasis_ewc_pytorch.errors import TapeError

    w = torch.randn(3, requires_grad = True)

    with pytest.raises(TapeError):
        backward(torch.tensor(1.), dict(w = w))

def test_cross_entropy_examples():
    import math
    from metastasis_ewc_pytorch.numkit import cross_entropy_l2, PROB_FLOOR

    perfect = torch.tensor([[1., 0.], [0., 1.]], dtype = torch.float64)
    labels = torch.tensor([0, 1])

    assert cross_entropy_l2(perfect, labels, [torch.zeros(3)]).item() == 0.

    uniform = torch.full((2, 2), 0.5, dtype = torch.float64)
    assert cross_entropy_l2(uniform, labels).item() == pytest.approx(math.log(2))

    param = torch.tensor([3.], dtype = torch.float64)
    assert cross_entropy_l2(perfect, labels, [param], 1e-4).item() == pytest.approx(9e-4, abs = 1e-15)

    wrong = torch.tensor([[0., 1.]], dtype = torch.float64)
    assert cross_entropy_l2(wrong, torch.tensor([0])).item() == pytest.approx(-math.log(PROB_FLOOR))

def test_class_probs_from_network_output():
    from metastasis_ewc_pytorch.numkit import to_class_probs, channel_softmax

    out = channel_softmax(torch.randn(3, 2, 1, 1))
    probs = to_class_probs(out)

    assert probs.shape == (3, 2)
    assert torch.allclose(probs.sum(dim = -1), torch.ones(3))
    assert to_class_probs(probs) is probs

def test_adam_single_step():
    from metastasis_ewc_pytorch.numkit import AdamState, adam_step

    param = torch.nn.Parameter(torch.zeros(1, dtype = torch.float64))
    params = dict(theta = param)

    state = AdamState(params, learning_rate = 1e-4)
    adam_step(params, dict(theta = torch.ones(1, dtype = torch.float64)), state)

    assert state.step == 1
    assert param.item() == pytest.approx(-1e-4 / (1 + 1e-8), abs = 1e-12)

def test_adam_zero_grads_leave_params():
    from metastasis_ewc_pytorch.numkit import AdamState, adam_step

    param = torch.nn.Parameter(torch.randn(4))
    before = param.detach().clone()
    params = dict(theta = param)

    adam_step(params, dict(theta = torch.zeros(4)), AdamState(params))

    assert torch.equal(param.detach(), before)

def test_adam_rejects_non_finite():
    from metastasis_ewc_pytorch.numkit import AdamState, adam_step
    from metastasis_ewc_pytorch.errors import NonFiniteGradientError

    params = dict(weight = torch.nn.Parameter(torch.zeros(2)))

    with pytest.raises(NonFiniteGradientError, match = 'weight'):
        adam_step(params, dict(weight = torch.tensor([0., float('nan')])), AdamState(params))

def test_he_init_variance():
    from metastasis_ewc_pytorch.numkit import he_init

    weights = he_init((2000, 50), generator = torch.Generator().manual_seed(0))
    assert weights.var().item() == pytest.approx(0.04, rel = 0.05)

    again = he_init((2000, 50), generator = torch.Generator().manual_seed(0))
    assert torch.equal(weights, again)

def test_conv_bias_starts_at_zero():
    from metastasis_ewc_pytorch.numkit import ConvValid

    conv = ConvValid(3, 8, 3)
    assert torch.equal(conv.bias.detach(), torch.zeros(8))
