"""Model assembly, ELBO, annealing, and the training loop."""

import dataclasses
import math

import numpy as np
import pytest
import torch

from vnd.data import gen_dataset
from vnd.models import (
    ActivationSpec,
    Conv2dSpec,
    DenseSpec,
    FlattenSpec,
    ModelSpec,
    build_model,
    parse_stack,
)
from vnd.training import (
    EpochStats,
    NumericalError,
    TrainConfig,
    anneal_tau,
    elbo_minibatch,
    history_to_csv,
    make_state,
    train,
)

from _helpers import rel_err

TOY_STACK = "dense(2,4,groups=2,n_base=1) tanh dense(4,2)"


def toy_model(seed=0):
    spec = ModelSpec(parse_stack(TOY_STACK))
    return build_model(spec, seed=seed)


def toy_data(n=16, seed=0):
    gen = torch.Generator().manual_seed(seed)
    x = torch.randn(n, 2, generator=gen, dtype=torch.float64)
    y = (x[:, 0] + x[:, 1] > 0).long()
    return x, y


class TestModelSpec:
    def test_stack_round_trip(self):
        text = "dense(2,64,groups=8,n_base=2) relu dense(64,64,groups=8,n_base=2) relu dense(64,2)"
        spec = ModelSpec(parse_stack(text))
        assert spec.to_string() == text
        assert parse_stack(spec.to_string()) == spec.layers

    def test_conv_round_trip(self):
        text = "conv(1,8,kernel=3,padding=1,groups=4,n_base=1) relu flatten dense(128,10)"
        assert ModelSpec(parse_stack(text)).to_string() == text

    def test_shape_mismatch_reported(self):
        spec = ModelSpec(parse_stack("dense(2,8) relu dense(4,2)"))
        errors = spec.validate()
        assert any("expects 4 features, gets 8" in e for e in errors)

    def test_conv_needs_input_shape(self):
        # 6x6 input, 3x3 kernel -> 4x4 spatial, 4 channels -> 64 flat features
        spec = ModelSpec(parse_stack("conv(1,4,kernel=3) relu flatten dense(64,2)"))
        assert any("input_shape" in e for e in spec.validate())
        with_shape = ModelSpec(spec.layers, input_shape=(1, 6, 6))
        assert with_shape.validate() == []

    def test_unknown_tokens_rejected(self):
        with pytest.raises(ValueError):
            parse_stack("dense(2,4) softplus")
        with pytest.raises(ValueError):
            parse_stack("dense(2)")

    def test_bad_group_config_reported(self):
        spec = ModelSpec(parse_stack("dense(2,4,groups=4,n_base=4)"))
        assert any("n_base" in e for e in spec.validate())


class TestBuildModel:
    def test_masked_layers_own_one_ordering_unit(self):
        model = toy_model()
        assert len(model.masked_layers) == 1
        assert model.masked_layers[0].mu_bar.numel() == 1  # K=2, n_base=1

    def test_noise_init_tighter_on_first_layer(self):
        model = toy_model()
        layers = model.variational_layers
        assert float(layers[0].log_alpha.detach().unique()) == -8.0
        assert float(layers[1].log_alpha.detach().unique()) == -1.0
        assert float(layers[0].mu_bar.detach().unique()) == 3.0

    def test_same_seed_same_parameters(self):
        a, b = toy_model(3), toy_model(3)
        for (na, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert torch.equal(pa, pb), na

    def test_forward_shapes(self):
        model = toy_model()
        x, _ = toy_data()
        out = model.forward_train(x, tau=1.0, generator=torch.Generator().manual_seed(0))
        assert out.shape == (16, 2)
        plan = model.width_plan(1.0)
        out = model.forward_eval(x, plan, mode="mean")
        assert out.shape == (16, 2)


class TestAnnealTau:
    CFG = dataclasses.replace(TrainConfig(), tau_start=1.0, tau_end=0.03,
                              tau_anneal_steps=100)

    def test_endpoints_exact(self):
        assert anneal_tau(0, self.CFG) == 1.0
        assert anneal_tau(100, self.CFG) == 0.03
        assert anneal_tau(10_000, self.CFG) == 0.03

    def test_midpoint_is_geometric_mean(self):
        mid = anneal_tau(50, self.CFG)
        assert abs(mid - math.sqrt(1.0 * 0.03)) < 1e-12

    def test_monotone_nonincreasing(self):
        vals = [anneal_tau(s, self.CFG) for s in range(0, 130)]
        assert all(b <= a + 1e-15 for a, b in zip(vals, vals[1:]))

    def test_frozen_schedule(self):
        cfg = dataclasses.replace(
            TrainConfig(), tau_start=0.5, tau_end=0.5, tau_anneal_steps=10
        )
        assert anneal_tau(5, cfg) == 0.5

    def test_unresolved_span_rejected(self):
        with pytest.raises(ValueError):
            anneal_tau(0, TrainConfig())


class TestElbo:
    def test_kappa_zero_reduces_to_likelihood(self):
        model = toy_model()
        x, y = toy_data()
        cfg = dataclasses.replace(TrainConfig(kappa=0.0), dataset_size=16,
                                  tau_anneal_steps=1)
        terms = elbo_minibatch(model, (x, y), cfg, torch.Generator().manual_seed(0), 1.0)
        assert float(terms.objective.detach()) == float(terms.neg_log_lik.detach())
        assert float(terms.kl_total.detach()) != 0.0

    def test_single_point_scale_is_one(self):
        model = toy_model()
        x, y = toy_data(1)
        cfg = dataclasses.replace(TrainConfig(kappa=0.0), dataset_size=1,
                                  tau_anneal_steps=1)
        gen_seed = 5
        terms = elbo_minibatch(model, (x, y), cfg,
                               torch.Generator().manual_seed(gen_seed), 1.0)
        logits = model.forward_train(x, 1.0, torch.Generator().manual_seed(gen_seed))
        direct = -float(model.log_prob_sum(logits, y).detach())
        assert abs(float(terms.neg_log_lik.detach()) - direct) < 1e-12

    def test_minibatch_scaling(self):
        model = toy_model()
        x, y = toy_data(8)
        cfg = dataclasses.replace(TrainConfig(kappa=0.0), dataset_size=80,
                                  tau_anneal_steps=1)
        terms = elbo_minibatch(model, (x, y), cfg, torch.Generator().manual_seed(1), 1.0)
        logits = model.forward_train(x, 1.0, torch.Generator().manual_seed(1))
        direct = -10.0 * float(model.log_prob_sum(logits, y).detach())
        assert abs(float(terms.neg_log_lik.detach()) - direct) < 1e-10

    def test_non_finite_objective_diagnosed(self):
        model = toy_model()
        with torch.no_grad():
            model.variational_layers[0].theta[0, 0] = float("nan")
        x, y = toy_data()
        cfg = dataclasses.replace(TrainConfig(), dataset_size=16, tau_anneal_steps=1)
        with pytest.raises(NumericalError) as err:
            elbo_minibatch(model, (x, y), cfg, torch.Generator().manual_seed(0), 1.0)
        assert "non-finite" in str(err.value)
        assert "theta" in str(err.value)

    def test_full_elbo_gradients_match_finite_differences(self):
        # 2-4-2 toy net; every parameter group, float64, fixed joint noise.
        # log_alpha moves off the clamp boundary (-8): central differences
        # straddle the kink there and see half the one-sided slope.
        model = toy_model(seed=9)
        gen = torch.Generator().manual_seed(99)
        with torch.no_grad():
            for layer in model.variational_layers:
                layer.log_alpha.uniform_(-4.0, -0.5, generator=gen)
                layer.bias_log_alpha.uniform_(-4.0, -0.5, generator=gen)
        x, y = toy_data(8, seed=10)
        cfg = dataclasses.replace(TrainConfig(kappa=0.1), dataset_size=8,
                                  tau_anneal_steps=1)

        def objective():
            gen = torch.Generator().manual_seed(77)
            return elbo_minibatch(model, (x, y), cfg, gen, tau=0.7).objective

        obj = objective()
        model.zero_grad()
        obj.backward()
        step = 1e-5
        worst = 0.0
        for name, p in model.named_parameters():
            grad = p.grad.detach().clone().view(-1)
            flat = p.data.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(objective().detach())
                flat[i] = orig - step
                lo = float(objective().detach())
                flat[i] = orig
                numeric = (hi - lo) / (2 * step)
                worst = max(worst, rel_err(float(grad[i]), numeric))
        assert worst < 1e-4, f"worst relative gradient error {worst:.3e}"


class TestTrainLoop:
    def test_zero_epochs_is_noop(self):
        model = toy_model()
        before = {k: v.clone() for k, v in model.state_dict().items()}
        x, y = toy_data(32)
        cfg = TrainConfig(epochs=0, batch_size=8, seed=0)
        history = train(model, (x, y), cfg)
        assert history == []
        for k, v in model.state_dict().items():
            assert torch.equal(v, before[k])

    def test_training_is_bitwise_reproducible(self):
        x, y = toy_data(64, seed=2)
        cfg = TrainConfig(epochs=5, batch_size=16, seed=11, lr=0.05)
        m1, m2 = toy_model(4), toy_model(4)
        h1 = train(m1, (x, y), cfg)
        h2 = train(m2, (x, y), cfg)
        assert h1 == h2
        for (k, a), (_, b) in zip(m1.state_dict().items(), m2.state_dict().items()):
            assert torch.equal(a, b), k

    def test_history_records_epoch_rows(self):
        x, y = toy_data(32)
        cfg = TrainConfig(epochs=3, batch_size=8, seed=0, lr=0.05)
        history = train(toy_model(), (x, y), cfg)
        assert [h.epoch for h in history] == [0, 1, 2]
        assert all(math.isfinite(h.objective) for h in history)
        assert history[-1].tau < history[0].tau  # annealed
        csv_text = history_to_csv(history, ["seed = 0"])
        assert csv_text.startswith("# seed = 0\nepoch,objective,kl,acc,tau\n")

    def test_batch_larger_than_dataset_rejected(self):
        x, y = toy_data(4)
        with pytest.raises(ValueError):
            train(toy_model(), (x, y), TrainConfig(epochs=1, batch_size=8, seed=0))

    def test_learning_rate_schedule_applied(self):
        x, y = toy_data(32)
        cfg = TrainConfig(epochs=4, batch_size=32, seed=0, lr=0.1,
                          lr_decay=0.1, lr_decay_interval=2)
        model = toy_model()
        state = make_state(model, cfg.resolved(32))
        train(model, (x, y), cfg, state=state)
        assert abs(state.optimizer.param_groups[0]["lr"] - 0.01) < 1e-15

    def test_kl_pressure_shrinks_expected_width(self):
        # Strong KL weight concentrates tail mass on small masks: the mean
        # kept-group count sum_j j beta_j drops versus a near-zero weight.
        data = gen_dataset("gaussian_blobs", 120, 0.5, seed=3)
        x, y = (torch.as_tensor(a) for a in data.split(0))
        stack = "dense(2,16,groups=4,n_base=1) relu dense(16,3)"

        def expected_width(kappa):
            model = build_model(ModelSpec(parse_stack(stack)), seed=5)
            cfg = TrainConfig(epochs=40, batch_size=30, seed=5, kappa=kappa, lr=0.05)
            train(model, (x, y), cfg)
            beta = model.masked_layers[0].ordering().beta().detach().numpy()
            return float((np.arange(1, 5) * beta).sum())

        assert expected_width(1e3) < expected_width(1e-5) - 0.5
