import sys
import os
import math
import pytest
import numpy as np

# Add parent directory to path
sys.path.append(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from mleann.evolve import (
    EvolutionConfig, Individual, PARAM_FIELDS, decode_weight_genome, encode_weight_codes, weight_codes,
    quantize_weights, decode_arch, encode_arch, decode_params, random_individual, build_network, make_context,
    evaluate_fitness, evaluate_population, rank_select, flip_bits, mutate, resize_weight_genome,
    evolve_generation, run_mleann, restricted, arch_genome_length, param_genome_length, weight_genome_length,
    describe_arch, RESTRICTED_HIDDEN,
)
from mleann.net import ACTIVATION_ALPHABET, parameter_count, rmse
from mleann.data import Dataset, split
from mleann.utils import ContractError

T, L, S, TSTAR, LSTAR = ACTIVATION_ALPHABET


def small_dataset(seed: int = 0, rows: int = 40, input_dim: int = 2) -> Dataset:
    rng = np.random.default_rng(seed)
    inputs = rng.uniform(-1.0, 1.0, size=(rows, input_dim))
    targets = np.sin(inputs.sum(axis=1))
    return Dataset(inputs, targets, rows // 2, name='toy')


def small_config(**overrides) -> EvolutionConfig:
    settings = dict(population=6, generations=3, epochs_per_eval=2, hidden_bounds=(1, 4), seed=3)
    settings.update(overrides)
    return EvolutionConfig(**settings)


def fake(fitness, tag='BP'):
    empty = np.zeros(0, dtype=np.uint8)
    return Individual(tag, empty, empty, empty, fitness=fitness)


def test_weight_decode_examples():
    bits = np.array([0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0], dtype=np.uint8)
    w = decode_weight_genome(bits, bits_per_weight=4, weight_range=0.3)
    assert w[0] == pytest.approx(-0.3, abs=1e-15)
    assert w[1] == pytest.approx(0.3, abs=1e-15)
    assert w[2] == pytest.approx(0.02, abs=1e-15)


def test_weight_decode_length_mismatch():
    with pytest.raises(ContractError):
        decode_weight_genome(np.zeros(7, dtype=np.uint8), bits_per_weight=4)
    with pytest.raises(ContractError):
        decode_weight_genome(np.zeros(8, dtype=np.uint8), bits_per_weight=4, expected=3)


def test_weight_codes_reencode_to_same_bits():
    rng = np.random.default_rng(1)
    for _ in range(50):
        bits = rng.integers(0, 2, size=4 * 13, dtype=np.uint8)
        assert np.array_equal(encode_weight_codes(weight_codes(bits, 4), 4), bits)


def test_quantize_recovers_decoded_codes():
    codes = np.arange(16)
    bits = encode_weight_codes(codes, 4)
    assert np.array_equal(quantize_weights(decode_weight_genome(bits, 4, 0.3), 4, 0.3), codes)
    assert quantize_weights(np.array([5.0, -5.0]), 4, 0.3).tolist() == [15, 0]


def test_decode_arch_table_architecture():
    bounds = (5, 16)
    kinds = (T,) * 8 + (TSTAR, TSTAR, LSTAR)
    hidden, decoded = decode_arch(encode_arch(kinds, bounds), bounds)
    assert hidden == 11
    assert decoded == kinds


def test_decode_arch_clamps_hidden_count():
    bounds = (5, 16)
    genome = np.zeros(arch_genome_length(bounds), dtype=np.uint8)
    hidden, kinds = decode_arch(genome, bounds)
    assert hidden == 5
    assert kinds == (T,) * 5

    genome[:5] = 1
    assert decode_arch(genome, bounds)[0] == 16


def test_decode_params_bounds_examples():
    zeros = np.zeros(16, dtype=np.uint8)
    ones = np.ones(16, dtype=np.uint8)
    low = decode_params(zeros, 'BP')
    high = decode_params(ones, 'BP')
    assert (low.learning_rate, low.momentum) == (pytest.approx(0.05), pytest.approx(0.05))
    assert (high.learning_rate, high.momentum) == (pytest.approx(0.25), pytest.approx(0.25))
    assert decode_params(np.zeros(8, dtype=np.uint8), 'LM').mu == pytest.approx(0.001)
    assert decode_params(np.zeros(16, dtype=np.uint8), 'SCG').sigma > 0


def test_random_genomes_decode_inside_intervals():
    rng = np.random.default_rng(2024)
    cfg = EvolutionConfig()
    for i in range(10000):
        tag = ('BP', 'SCG', 'QNA', 'LM')[i % 4]
        ind = random_individual(tag, 4, cfg, rng)
        trainer_cfg = decode_params(ind.param_bits, tag, cfg.epochs_per_eval, cfg.param_bits)
        trainer_cfg.validate()
        for name, low, high, open_low in PARAM_FIELDS[tag]:
            value = getattr(trainer_cfg, name)
            assert (low < value if open_low else low <= value) and value <= high
        hidden, kinds = decode_arch(ind.arch_bits, cfg.hidden_bounds)
        assert 5 <= hidden <= 16 and len(kinds) == hidden
        assert ind.weight_bits.size == weight_genome_length(4, hidden, cfg.bits_per_weight)


def test_build_network_uses_decoded_weights():
    cfg = small_config()
    ind = random_individual('LM', 2, cfg, np.random.default_rng(0))
    net = build_network(ind, 2, cfg)
    assert np.array_equal(net.parameters(), decode_weight_genome(ind.weight_bits, 4, 0.3))
    assert np.all(np.abs(net.parameters()) <= 0.3 + 1e-15)


def test_config_validation():
    with pytest.raises(ContractError):
        EvolutionConfig(population=1).validate()
    with pytest.raises(ContractError):
        EvolutionConfig(elitism=0.6, selection_fraction=0.5).validate()
    with pytest.raises(ContractError):
        EvolutionConfig(fitness_split='train').validate()
    assert EvolutionConfig().elite_count == 2
    assert restricted(EvolutionConfig()).hidden_bounds == RESTRICTED_HIDDEN


def test_zero_epoch_fitness_is_rmse_of_decoded_net():
    ds = small_dataset()
    cfg = small_config(epochs_per_eval=0)
    context = make_context(ds, cfg)
    ind = random_individual('SCG', 2, cfg, np.random.default_rng(5))
    scored = evaluate_fitness(ind, context)
    _, test = split(ds)
    assert scored.fitness == rmse(build_network(ind, 2, cfg), test)
    assert ind.fitness is None


def test_fitness_is_deterministic():
    ds = small_dataset()
    cfg = small_config(epochs_per_eval=3)
    context = make_context(ds, cfg)
    ind = random_individual('QNA', 2, cfg, np.random.default_rng(6))
    assert evaluate_fitness(ind, context).fitness == evaluate_fitness(ind, context).fitness


def test_lamarckian_writes_back_quantized_weights():
    ds = small_dataset()
    cfg = small_config(epochs_per_eval=3, lamarckian=True)
    context = make_context(ds, cfg)
    ind = random_individual('LM', 2, cfg, np.random.default_rng(7))
    scored = evaluate_fitness(ind, context)
    expected = encode_weight_codes(quantize_weights(scored.trained.parameters(), 4, 0.3), 4)
    assert np.array_equal(scored.weight_bits, expected)


def test_validation_fitness_split():
    ds = small_dataset()
    context = make_context(ds, small_config(fitness_split='validation'))
    assert context.train.rows == 16
    assert context.target.rows == 4


def test_rank_select_examples():
    pop = [fake(3.0), fake(1.0), fake(2.0), fake(4.0)]
    parents = rank_select(pop, 0.5)
    assert [p.fitness for p in parents] == [1.0, 2.0]
    assert len(rank_select(pop, 1.0)) == 4

    ties = [fake(1.0) for _ in range(4)]
    assert rank_select(ties, 0.5) == ties[:2]


def test_rank_select_errors():
    with pytest.raises(ContractError):
        rank_select([], 0.5)
    with pytest.raises(ContractError):
        rank_select([fake(None)], 0.5)


def test_flip_bits_probability_extremes():
    rng = np.random.default_rng(0)
    bits = np.array([0, 1, 0, 1], dtype=np.uint8)
    assert np.array_equal(flip_bits(bits, 0.0, rng), bits)
    assert np.array_equal(flip_bits(bits, 1.0, rng), 1 - bits)


def test_single_flip_of_weight_code():
    bits = np.zeros(4, dtype=np.uint8)
    bits[0] = 1
    assert decode_weight_genome(bits, 4, 0.3)[0] == pytest.approx(0.02, abs=1e-15)


def test_mutate_rate_zero_clones():
    cfg = small_config()
    ind = random_individual('BP', 2, cfg, np.random.default_rng(1))
    ind.fitness = 0.5
    child = mutate(ind, 0.0, np.random.default_rng(2), 2, cfg)
    assert child is not ind
    assert np.array_equal(child.genome(), ind.genome())
    assert child.fitness == 0.5


def test_mutate_keeps_weight_genome_consistent():
    cfg = small_config()
    rng = np.random.default_rng(9)
    ind = random_individual('LM', 2, cfg, rng)
    for _ in range(300):
        ind = mutate(ind, 1.0, rng, 2, cfg)
        assert ind.fitness is None
        hidden, _ = decode_arch(ind.arch_bits, cfg.hidden_bounds)
        assert ind.weight_bits.size == 4 * parameter_count(2, hidden)
        assert ind.param_bits.size == param_genome_length('LM', cfg.param_bits)


def test_mutate_rejects_bad_rate():
    cfg = small_config()
    ind = random_individual('BP', 2, cfg, np.random.default_rng(1))
    with pytest.raises(ContractError):
        mutate(ind, 1.5, np.random.default_rng(0), 2, cfg)


def test_resize_grows_by_one_node():
    rng = np.random.default_rng(0)
    d, B = 4, 4
    bits = rng.integers(0, 2, size=B * parameter_count(d, 8), dtype=np.uint8)
    grown = resize_weight_genome(bits, d, 8, 9, B, rng)
    assert grown.size == bits.size + B * (d + 2)

    old = decode_weight_genome(bits, B, 0.3)
    new = decode_weight_genome(grown, B, 0.3)
    node = d + 1
    assert np.array_equal(new[:8 * node], old[:8 * node])
    assert np.array_equal(new[9 * node:9 * node + 8], old[8 * node:8 * node + 8])
    assert new[-1] == old[-1]

    shrunk = resize_weight_genome(grown, d, 9, 8, B, rng)
    assert np.array_equal(shrunk, bits)


def test_generation_keeps_size_and_best_fitness():
    ds = small_dataset()
    cfg = small_config()
    context = make_context(ds, cfg)
    rng = np.random.default_rng(4)
    pop = evaluate_population([random_individual('BP', 2, cfg, rng) for _ in range(cfg.population)], context)
    best = min(ind.fitness for ind in pop)
    for _ in range(3):
        pop = evolve_generation(pop, cfg, context, rng)
        assert len(pop) == cfg.population
        assert all(ind.fitness is not None for ind in pop)
        assert min(ind.fitness for ind in pop) <= best
        best = min(ind.fitness for ind in pop)


def test_full_elitism_without_mutation_is_a_fixed_point():
    ds = small_dataset()
    cfg = small_config(elitism=1.0, selection_fraction=1.0, mutation_rate=0.0)
    context = make_context(ds, cfg)
    rng = np.random.default_rng(8)
    pop = evaluate_population([random_individual('SCG', 2, cfg, rng) for _ in range(cfg.population)], context)
    ranked = sorted(pop, key=lambda ind: ind.fitness)
    after = evolve_generation(pop, cfg, context, rng)
    assert [ind.fitness for ind in after] == [ind.fitness for ind in ranked]
    for a, b in zip(after, ranked):
        assert np.array_equal(a.genome(), b.genome())


def test_degenerate_run_returns_better_random_individual():
    ds = small_dataset()
    cfg = small_config(population=2, generations=1, epochs_per_eval=0)
    results = run_mleann(cfg, ds)
    assert set(results) == {'BP', 'SCG', 'QNA', 'LM'}
    for stream in results.values():
        assert len(stream.trace) == 2
        assert len(stream.population) == 2
        assert stream.best.fitness == min(ind.fitness for ind in stream.population)


def test_traces_are_monotone_and_complete():
    ds = small_dataset()
    cfg = small_config(generations=4)
    results = run_mleann(cfg, ds, algorithms=('LM',))
    trace = results['LM'].trace
    assert [s.generation for s in trace] == [0, 1, 2, 3, 4]
    assert all(later.best <= earlier.best for earlier, later in zip(trace, trace[1:]))
    assert trace[-1].best == results['LM'].best.fitness
    assert trace[-1].best_arch == describe_arch(results['LM'].best, cfg)


def test_seeded_runs_are_identical():
    ds = small_dataset()
    cfg = small_config()
    first = run_mleann(cfg, ds, algorithms=('BP', 'LM'))
    second = run_mleann(cfg, ds, algorithms=('BP', 'LM'))
    for tag in ('BP', 'LM'):
        assert [(s.best, s.mean, s.best_arch) for s in first[tag].trace] == \
               [(s.best, s.mean, s.best_arch) for s in second[tag].trace]
        for a, b in zip(first[tag].population, second[tag].population):
            assert np.array_equal(a.genome(), b.genome())


def test_restricted_runs_stay_within_four_neurons():
    ds = small_dataset()
    cfg = restricted(small_config(hidden_bounds=(5, 16), population=4, generations=2, epochs_per_eval=1))
    results = run_mleann(cfg, ds, algorithms=('SCG',))
    for ind in results['SCG'].population:
        assert decode_arch(ind.arch_bits, cfg.hidden_bounds)[0] <= 4


def test_aborted_training_scores_infinity(monkeypatch):
    from mleann import evolve
    from mleann.utils import TrainingAborted

    def explode(*args, **kwargs):
        raise TrainingAborted(3, 'non-finite loss')

    monkeypatch.setattr(evolve, 'train', explode)
    cfg = small_config()
    context = make_context(small_dataset(), cfg)
    ind = random_individual('BP', 2, cfg, np.random.default_rng(0))
    scored = evaluate_fitness(ind, context)
    assert math.isinf(scored.fitness)
    assert scored.trained is None


def test_search_improves_on_first_generation():
    ds = small_dataset()
    cfg = small_config(population=10, generations=15, epochs_per_eval=3, mutation_rate=1.0, seed=1)
    trace = run_mleann(cfg, ds, algorithms=('BP',))['BP'].trace
    assert trace[-1].best < trace[0].best


def test_worker_pool_matches_serial_run():
    ds = small_dataset()
    cfg = small_config(population=4, generations=2)
    serial = run_mleann(cfg, ds, algorithms=('SCG', 'LM'), workers=1)
    pooled = run_mleann(cfg, ds, algorithms=('SCG', 'LM'), workers=2)
    for tag in ('SCG', 'LM'):
        assert [(s.best, s.mean, s.best_arch) for s in serial[tag].trace] == \
               [(s.best, s.mean, s.best_arch) for s in pooled[tag].trace]
        assert [ind.fitness for ind in serial[tag].population] == [ind.fitness for ind in pooled[tag].population]
