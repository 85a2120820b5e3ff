"""
Tests for attribute modules, blending, stack composition and assembly
"""
import logging
from dataclasses import replace

import numpy as np
import pytest

from src.cascade import (
    MEAN,
    SAMPLE,
    AlphaSchedule,
    AttributeModule,
    CascadeActor,
    CascadeStack,
    alpha_at,
    assemble,
    base_action,
    base_fingerprint,
    base_policy_actor,
    blend,
    comp_penalty,
    compensate_forward,
    init_attribute_module,
    init_base_stack,
    stack_act,
    train_attribute_module,
)
from src.envs import AttributeKind, AttributeSpec, EnvInstance, project_many, project_state
from src.errors import ConfigurationError, FingerprintMismatchError
from src.nncore import gaussian_mean, init_gaussian_policy, mlp_forward, policy_to_tensors
from src.rlcore import RlConfig, parameter_rng


def dual_obstacle_env():
    return EnvInstance(attributes=(
        AttributeSpec(AttributeKind.REACHING),
        AttributeSpec(AttributeKind.OBSTACLE, "obstacle_a", {"fraction": 0.35}),
        AttributeSpec(AttributeKind.OBSTACLE, "obstacle_b", {"fraction": 0.7}),
    ))


def make_module(env, name, rng, zero=False, alpha=1.0):
    spec = env.attribute(name)
    head = init_gaussian_policy(
        env.feature_dim(spec) + env.action_dim, env.action_dim, rng,
        hidden_sizes=(6,), output_scale=0.0 if zero else 1.0,
    )
    return AttributeModule(spec, head, alpha=alpha)


class TestCompensateForward:
    """Test cases for a single module's compensative action"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = dual_obstacle_env()
        self.rng = np.random.default_rng(0)
        self.s_i = self.rng.normal(size=7)
        self.a_prev = np.array([0.3, -0.2])

    def test_zero_head_mean(self):
        """Test a zero compensation from a zero output layer"""
        module = make_module(self.env, "obstacle_a", self.rng, zero=True)

        np.testing.assert_array_equal(compensate_forward(module, self.s_i, self.a_prev, MEAN), [0.0, 0.0])

    def test_sample_mode_is_reproducible(self):
        """Test seeded sampling"""
        module = make_module(self.env, "obstacle_a", self.rng)
        first = compensate_forward(module, self.s_i, self.a_prev, SAMPLE, np.random.default_rng(4))
        second = compensate_forward(module, self.s_i, self.a_prev, SAMPLE, np.random.default_rng(4))

        np.testing.assert_array_equal(first, second)

    def test_mean_matches_manual_forward(self):
        """Test the concatenated input through an explicit forward pass"""
        module = make_module(self.env, "obstacle_a", self.rng)
        w, b = module.head.mean_net.weights, module.head.mean_net.biases
        x = np.concatenate([self.s_i, self.a_prev])
        expected = w[1] @ np.tanh(w[0] @ x + b[0]) + b[1]

        np.testing.assert_allclose(compensate_forward(module, self.s_i, self.a_prev), expected, rtol=1e-12, atol=1e-12)

    def test_dimension_mismatch(self):
        """Test that a wrong S_i width is a configuration error"""
        module = make_module(self.env, "obstacle_a", self.rng)

        with pytest.raises(ConfigurationError):
            compensate_forward(module, self.s_i[:5], self.a_prev)

    def test_sample_mode_needs_generator(self):
        """Test that sample mode without a generator is rejected"""
        module = make_module(self.env, "obstacle_a", self.rng)

        with pytest.raises(ConfigurationError):
            compensate_forward(module, self.s_i, self.a_prev, SAMPLE)


class TestBlendAndSchedule:
    """Test cases for blending, the alpha ramp and the penalty"""

    def test_zero_alpha_passthrough(self):
        """Test a = a_prev at alpha 0"""
        np.testing.assert_array_equal(blend([1.0, -2.0], [3.0, 3.0], 0.0), [1.0, -2.0])

    def test_vector_sum(self):
        """Test a = a_prev + a_c at alpha 1"""
        np.testing.assert_array_equal(blend([1.0, 0.0], [-0.5, 0.5], 1.0), [0.5, 0.5])

    def test_clamped_to_bound(self):
        """Test componentwise clamping to the force bound"""
        np.testing.assert_array_equal(blend([4.0, -4.0], [3.0, -3.0], 1.0, 5.0), [5.0, -5.0])

    def test_alpha_start(self):
        """Test alpha_0 at iteration 0"""
        assert alpha_at(AlphaSchedule(0.1, 0.4), 0, 100) == 0.1

    def test_alpha_saturates(self):
        """Test alpha 1 from ceil(f * total) on"""
        schedule = AlphaSchedule(0.1, 0.4)

        assert alpha_at(schedule, 40, 100) == 1.0
        assert alpha_at(schedule, 99, 100) == 1.0
        assert alpha_at(schedule, 39, 100) < 1.0

    def test_alpha_midpoint(self):
        """Test (alpha_0 + 1) / 2 halfway through the ramp"""
        assert alpha_at(AlphaSchedule(0.1, 0.4), 20, 100) == pytest.approx(0.55, abs=1e-12)

    def test_alpha_is_nondecreasing(self):
        """Test monotonicity over a whole run"""
        values = [alpha_at(AlphaSchedule(0.2, 0.3), k, 37) for k in range(37)]

        assert values == sorted(values)

    @pytest.mark.parametrize("start,fraction", [(1.0, 0.4), (-0.1, 0.4), (0.1, 0.0), (0.1, 1.5)])
    def test_invalid_schedule(self, start, fraction):
        """Test schedule validation"""
        with pytest.raises(ConfigurationError):
            AlphaSchedule(start, fraction)

    def test_penalty_inactive(self):
        """Test zero penalty for zero compensation"""
        assert comp_penalty([0.0, 0.0], 0.01) == 0.0

    def test_penalty_value(self):
        """Test -c * ||a_c||^2"""
        assert comp_penalty([1.0, 1.0], 0.01) == pytest.approx(-0.02)

    def test_penalty_is_quadratic(self):
        """Test that doubling a_c quadruples the penalty"""
        a_c = np.array([0.3, -0.7])

        assert comp_penalty(2 * a_c, 0.01) == pytest.approx(4 * comp_penalty(a_c, 0.01))
        assert comp_penalty(a_c, 0.01) < 0


class TestStackAct:
    """Test cases for cascade composition"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = dual_obstacle_env()
        self.rng = np.random.default_rng(1)
        self.base = init_base_stack(self.env, self.rng, hidden_sizes=(8,))
        self.world = self.env.reset(None, np.random.default_rng(2))

    def test_bare_base(self):
        """Test that an empty stack returns the base action"""
        action, compensations = stack_act(self.base, self.world)
        expected = np.clip(gaussian_mean(self.base.base, project_state(self.world, self.env.base)), -5.0, 5.0)

        np.testing.assert_array_equal(action, expected)
        assert compensations == []

    def test_zero_head_module_is_identity(self):
        """Test that a zero-head module leaves the base action"""
        stack = replace(self.base, modules=(make_module(self.env, "obstacle_a", self.rng, zero=True),))
        action, _ = stack_act(stack, self.world)

        np.testing.assert_array_equal(action, base_action(self.base, self.world))

    def test_two_modules_manual_composition(self):
        """Test step-by-step composition with hand-set blend weights"""
        first = make_module(self.env, "obstacle_a", self.rng, alpha=0.5)
        second = make_module(self.env, "obstacle_b", self.rng, alpha=0.8)
        stack = replace(self.base, modules=(first, second))

        a0 = np.clip(mlp_forward(self.base.base.mean_net, project_state(self.world, self.env.base)), -5.0, 5.0)
        s1 = project_state(self.world, first.spec)
        a1 = np.clip(a0 + 0.5 * mlp_forward(first.head.mean_net, np.concatenate([s1, a0])), -5.0, 5.0)
        s2 = project_state(self.world, second.spec)
        a2 = np.clip(a1 + 0.8 * mlp_forward(second.head.mean_net, np.concatenate([s2, a1])), -5.0, 5.0)

        action, compensations = stack_act(stack, self.world)

        np.testing.assert_allclose(action, a2, rtol=1e-12, atol=1e-12)
        assert len(compensations) == 2

    def test_zero_alpha_everywhere_is_base(self):
        """Test exact passthrough when every alpha is 0"""
        modules = tuple(make_module(self.env, name, self.rng, alpha=0.0) for name in ("obstacle_a", "obstacle_b"))
        action, _ = stack_act(replace(self.base, modules=modules), self.world)

        np.testing.assert_array_equal(action, base_action(self.base, self.world))

    def test_zero_head_order_is_irrelevant(self):
        """Test that permuting zero-head modules leaves the output"""
        a = make_module(self.env, "obstacle_a", self.rng, zero=True)
        b = make_module(self.env, "obstacle_b", self.rng, zero=True)
        forward, _ = stack_act(replace(self.base, modules=(a, b)), self.world)
        backward, _ = stack_act(replace(self.base, modules=(b, a)), self.world)

        np.testing.assert_array_equal(forward, backward)

    def test_missing_projection_names_attribute(self):
        """Test the configuration error for a module without world features"""
        stack = replace(self.base, modules=(make_module(self.env, "obstacle_b", self.rng),))
        bare_world = EnvInstance().reset()

        with pytest.raises(ConfigurationError, match="obstacle_b"):
            stack_act(stack, bare_world)

    def test_sample_mode_is_reproducible(self):
        """Test seeded stochastic acting"""
        stack = replace(self.base, modules=(make_module(self.env, "obstacle_a", self.rng),))
        first, _ = stack_act(stack, self.world, SAMPLE, np.random.default_rng(9))
        second, _ = stack_act(stack, self.world, SAMPLE, np.random.default_rng(9))

        np.testing.assert_array_equal(first, second)


class TestFingerprintAndActors:
    """Test cases for base fingerprints and the training actors"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = dual_obstacle_env()
        self.rng = np.random.default_rng(3)
        self.base = init_base_stack(self.env, self.rng, hidden_sizes=(8,))

    def test_fingerprint_is_stable(self):
        """Test a 16-hex-digit hash that is reproducible"""
        fingerprint = base_fingerprint(self.base.base)

        assert len(fingerprint) == 16
        assert fingerprint == base_fingerprint(self.base.base)

    def test_fingerprint_tracks_parameters(self):
        """Test that different bases hash differently"""
        other = init_base_stack(self.env, np.random.default_rng(4), hidden_sizes=(8,))

        assert base_fingerprint(other.base) != base_fingerprint(self.base.base)

    def test_base_stack_dimensions(self):
        """Test that a CALNet base reads the reaching projection only"""
        assert self.base.base.in_dim == 6
        assert self.base.value_net.in_dim == 6
        assert self.base.action_bound == 5.0

    def test_baseline_reads_every_attribute(self):
        """Test a from-scratch baseline over the full state"""
        baseline = init_base_stack(self.env, self.rng, specs=self.env.attributes, hidden_sizes=(8,))
        world = self.env.reset(None, self.rng)

        assert baseline.base.in_dim == len(project_many(world, self.env.attributes)) == 20

    def test_base_policy_actor_rejects_modules(self):
        """Test that base training needs a module-free stack"""
        stack = replace(self.base, modules=(make_module(self.env, "obstacle_a", self.rng),))

        with pytest.raises(ConfigurationError):
            base_policy_actor(stack)

    def test_new_module_records_base(self):
        """Test initialization of a module behind a stack"""
        module, value_net = init_attribute_module(self.base, self.env.attribute("obstacle_a"), self.env, self.rng)

        assert module.base_fingerprint == base_fingerprint(self.base.base)
        assert module.alpha == AlphaSchedule().start
        assert module.head.in_dim == 9
        assert value_net.in_dim == 6 + 7
        assert not module.trained

    def test_cascade_actor_follows_schedule(self):
        """Test alpha from the ramp and a penalty from the sample"""
        module, value_net = init_attribute_module(self.base, self.env.attribute("obstacle_a"), self.env, self.rng)
        actor = CascadeActor(self.base, module, value_net).for_iteration(5, 10)
        world = self.env.reset(None, self.rng)
        step = actor.act(world, np.random.default_rng(0))

        assert actor.module.alpha == 1.0
        assert step.penalty == pytest.approx(comp_penalty(step.head_sample, module.penalty_coef))
        assert step.head_input.shape == (9,)
        assert step.value_input.shape == (13,)

    def test_cascade_actor_tensors_are_the_tail_only(self):
        """Test that only the new head and value net are trainable"""
        module, value_net = init_attribute_module(self.base, self.env.attribute("obstacle_a"), self.env, self.rng)
        names = CascadeActor(self.base, module, value_net).trainable_tensors()

        assert all(name.startswith(("policy.", "value.")) for name in names)
        assert "policy.log_std" in names


class TestTrainAndAssemble:
    """Test cases for module training and zero-shot assembly"""

    def setup_method(self):
        """Setup test fixtures"""
        self.env = dual_obstacle_env()
        self.base = init_base_stack(self.env, np.random.default_rng(5), hidden_sizes=(8,))
        self.world = self.env.reset(None, np.random.default_rng(6))

    def test_zero_iterations(self):
        """Test that no training leaves a near-zero head and base-like behaviour"""
        env = self.env.with_attributes(self.env.attributes[:2])
        module, result = train_attribute_module(self.base, env.attribute("obstacle_a"), env, RlConfig(iterations=0))
        stack = assemble(self.base, [module])

        assert not module.trained
        assert len(result.log) == 0
        np.testing.assert_allclose(stack_act(stack, self.world)[0], base_action(self.base, self.world), atol=0.05)

    def test_module_parameters_come_from_the_parameter_stream(self):
        """Test that a new module is initialised from parameter_rng(seed)"""
        env = self.env.with_attributes(self.env.attributes[:2])
        spec = env.attribute("obstacle_a")
        module, _ = train_attribute_module(self.base, spec, env, RlConfig(iterations=0, seed=4))
        expected, _ = init_attribute_module(self.base, spec, env, parameter_rng(4))

        trained = policy_to_tensors(module.head, "policy")
        for name, tensor in policy_to_tensors(expected.head, "policy").items():
            np.testing.assert_array_equal(trained[name], tensor)

    def test_training_keeps_prefix_frozen(self):
        """Test that the base is bit-identical after module training"""
        env = self.env.with_attributes(self.env.attributes[:2])
        before = {k: v.tobytes() for k, v in base_policy_actor(self.base).trainable_tensors().items()}
        config = RlConfig(horizon=32, epochs=1, minibatch_size=16, iterations=1)

        module, result = train_attribute_module(self.base, env.attribute("obstacle_a"), env, config)
        after = {k: v.tobytes() for k, v in base_policy_actor(result.actor.prefix).trainable_tensors().items()}

        assert module.trained
        assert before == after
        assert module.base_fingerprint == base_fingerprint(self.base.base)

    def test_training_behind_existing_module(self):
        """Test that a second module trains behind a stack whose first module stays frozen"""
        first = make_module(self.env, "obstacle_a", np.random.default_rng(7))
        prefix = assemble(self.base, [first])
        before = {k: v.tobytes() for k, v in policy_to_tensors(first.head, "policy").items()}
        config = RlConfig(horizon=32, epochs=1, minibatch_size=16, iterations=1)

        module, result = train_attribute_module(prefix, self.env.attribute("obstacle_b"), self.env, config)
        kept = result.actor.prefix.modules[0]
        after = {k: v.tobytes() for k, v in policy_to_tensors(kept.head, "policy").items()}

        assert module.spec.name == "obstacle_b"
        assert module.trained
        assert before == after
        assert len(assemble(self.base, [first, module]).modules) == 2

    def test_assemble_empty(self):
        """Test that assembling no modules behaves like the base"""
        stack = assemble(self.base, [])

        np.testing.assert_array_equal(stack_act(stack, self.world)[0], base_action(self.base, self.world))

    def test_assemble_sets_unit_alpha(self):
        """Test alpha 1 on every assembled module"""
        rng = np.random.default_rng(7)
        modules = [make_module(self.env, name, rng, alpha=0.3) for name in ("obstacle_a", "obstacle_b")]
        stack = assemble(self.base, modules)

        assert [m.alpha for m in stack.modules] == [1.0, 1.0]
        assert stack.attribute_names == ["reaching", "obstacle_a", "obstacle_b"]

    def test_dual_obstacle_stack_acts(self):
        """Test that two obstacle modules read distinct projections"""
        rng = np.random.default_rng(8)
        modules = [make_module(self.env, name, rng) for name in ("obstacle_a", "obstacle_b")]
        stack = assemble(self.base, modules)
        action, compensations = stack_act(stack, self.world)

        assert action.shape == (2,)
        assert len(compensations) == 2
        assert not np.array_equal(
            project_state(self.world, modules[0].spec), project_state(self.world, modules[1].spec)
        )

    def test_action_dimension_mismatch(self):
        """Test that modules with another action size are rejected"""
        spec = self.env.attribute("obstacle_a")
        module = AttributeModule(spec, init_gaussian_policy(10, 3, np.random.default_rng(0), hidden_sizes=(4,)))

        with pytest.raises(ConfigurationError):
            assemble(self.base, [module])

    def test_base_with_modules_rejected(self):
        """Test that assembly starts from a module-free base"""
        stack = replace(self.base, modules=(make_module(self.env, "obstacle_a", np.random.default_rng(0)),))

        with pytest.raises(ConfigurationError):
            assemble(stack, [])

    def test_fingerprint_mismatch_warns(self, caplog):
        """Test a warning for a module trained on another base"""
        module = replace(make_module(self.env, "obstacle_a", np.random.default_rng(0)), base_fingerprint="0" * 16)

        with caplog.at_level(logging.WARNING, logger="src.cascade"):
            stack = assemble(self.base, [module])

        assert len(stack.modules) == 1
        assert any("trained on base" in r.getMessage() for r in caplog.records)

    def test_fingerprint_mismatch_strict(self):
        """Test the strict fingerprint check"""
        module = replace(make_module(self.env, "obstacle_a", np.random.default_rng(0)), base_fingerprint="0" * 16)

        with pytest.raises(FingerprintMismatchError):
            assemble(self.base, [module], strict_fingerprint=True)

    def test_stack_validates_module_action_dim(self):
        """Test the stack-level action dimension check"""
        spec = self.env.attribute("obstacle_a")
        module = AttributeModule(spec, init_gaussian_policy(10, 3, np.random.default_rng(0), hidden_sizes=(4,)))

        with pytest.raises(ConfigurationError):
            CascadeStack(self.base.base, self.base.base_specs, (module,))
