import math
import time
from functools import partial
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .utils import logger, ContractError, TrainingAborted, describe_counts
from .net import Mlp, ActivationKind, ACTIVATION_ALPHABET, parameter_count, rmse
from .data import Dataset, DataSlice, split, validation_split
from .trainers import ALGORITHMS, BpConfig, ScgConfig, QnaConfig, LmConfig, normalize_algorithm, train

ACTIVATION_GENE_BITS = 3

# (field, low, high, open_low) per algorithm; open_low fields never decode to zero
PARAM_FIELDS = {
    'BP': (
        ('learning_rate', 0.05, 0.25, False),
        ('momentum', 0.05, 0.25, False),
    ),
    'SCG': (
        ('sigma', 0.0, 1e-4, True),
        ('lam', 0.0, 1e-6, True),
    ),
    'QNA': (
        ('step_init', 1e-6, 100.0, False),
        ('step_limit', 0.1, 0.6, False),
        ('perf_scale', 0.001, 0.003, False),
        ('step_scale', 0.1, 0.4, False),
    ),
    'LM': (
        ('mu', 0.001, 0.02, False),
    ),
}

CONFIG_BUILDERS = {'BP': BpConfig, 'SCG': ScgConfig, 'QNA': QnaConfig, 'LM': LmConfig}

UNRESTRICTED_HIDDEN = (5, 16)
RESTRICTED_HIDDEN = (1, 4)


@dataclass
class EvolutionConfig:
    population: int = 40
    generations: int = 40
    epochs_per_eval: int = 500
    hidden_bounds: Tuple[int, int] = UNRESTRICTED_HIDDEN
    weight_range: float = 0.3
    selection_fraction: float = 0.50
    elitism: float = 0.05
    mutation_rate: float = 0.40
    bits_per_weight: int = 4
    param_bits: int = 8
    seed: int = 0
    fitness_split: str = 'test'
    lamarckian: bool = False

    def validate(self):
        if self.population < 2:
            raise ContractError(f"population must be at least 2, got {self.population}")
        if self.generations < 0 or self.epochs_per_eval < 0:
            raise ContractError("generations and epochs_per_eval must be non-negative")
        if not 0 < self.elitism <= self.selection_fraction <= 1:
            raise ContractError(
                f"need 0 < elitism ({self.elitism}) <= selection ({self.selection_fraction}) <= 1"
            )
        if not 0 <= self.mutation_rate <= 1:
            raise ContractError(f"mutation rate must lie in [0, 1], got {self.mutation_rate}")
        lo, hi = self.hidden_bounds
        if not 1 <= lo <= hi:
            raise ContractError(f"hidden bounds must satisfy 1 <= lo <= hi, got {self.hidden_bounds}")
        if self.bits_per_weight < 1 or self.param_bits < 1:
            raise ContractError("bit widths must be positive")
        if not self.weight_range > 0:
            raise ContractError(f"weight range must be positive, got {self.weight_range}")
        if self.fitness_split not in ('test', 'validation'):
            raise ContractError(f"fitness split must be 'test' or 'validation', got '{self.fitness_split}'")

    @property
    def elite_count(self) -> int:
        return max(1, math.ceil(round(self.elitism * self.population, 9)))


@dataclass(eq=False)
class Individual:
    """One chromosome: architecture, weight and learning-parameter genes for one algorithm"""
    algorithm: str
    arch_bits: np.ndarray
    weight_bits: np.ndarray
    param_bits: np.ndarray
    fitness: Optional[float] = None
    trained: Optional[Mlp] = field(default=None, repr=False)
    flops: int = 0

    def clone(self) -> 'Individual':
        return Individual(self.algorithm, self.arch_bits.copy(), self.weight_bits.copy(),
                          self.param_bits.copy(), self.fitness, self.trained, self.flops)

    def genome(self) -> np.ndarray:
        return np.concatenate([self.arch_bits, self.weight_bits, self.param_bits])


@dataclass
class FitnessContext:
    """Everything a worker needs to score an individual"""
    train: DataSlice
    target: DataSlice
    input_dim: int
    cfg: EvolutionConfig


@dataclass
class GenerationStats:
    generation: int
    best: float
    mean: float
    best_arch: str


@dataclass
class StreamResult:
    algorithm: str
    best: Individual
    trace: List[GenerationStats]
    population: List[Individual]
    wall_time: float = 0.0


def bits_to_int(bits: np.ndarray) -> int:
    """MSB-first binary to integer"""
    value = 0
    for bit in bits:
        value = (value << 1) | int(bit)
    return value


def int_to_bits(value: int, width: int) -> np.ndarray:
    return np.array([(value >> (width - 1 - i)) & 1 for i in range(width)], dtype=np.uint8)


def hidden_gene_bits(bounds: Tuple[int, int]) -> int:
    return max(1, int(bounds[1]).bit_length())


def arch_genome_length(bounds: Tuple[int, int]) -> int:
    return hidden_gene_bits(bounds) + ACTIVATION_GENE_BITS * bounds[1]


def weight_genome_length(input_dim: int, hidden_count: int, bits_per_weight: int) -> int:
    return bits_per_weight * parameter_count(input_dim, hidden_count)


def param_genome_length(algorithm: str, param_bits: int) -> int:
    return param_bits * len(PARAM_FIELDS[normalize_algorithm(algorithm)])


def weight_codes(bits: np.ndarray, bits_per_weight: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    if bits.size % bits_per_weight:
        raise ContractError(f"weight genome of {bits.size} bits is not a multiple of {bits_per_weight}")
    powers = 1 << np.arange(bits_per_weight - 1, -1, -1)
    return bits.reshape(-1, bits_per_weight) @ powers


def encode_weight_codes(codes: np.ndarray, bits_per_weight: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if np.any(codes < 0) or np.any(codes >= 1 << bits_per_weight):
        raise ContractError(f"weight codes must lie in [0, {(1 << bits_per_weight) - 1}]")
    shifts = np.arange(bits_per_weight - 1, -1, -1)
    return ((codes[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def decode_weight_genome(bits: np.ndarray, bits_per_weight: int = 4, weight_range: float = 0.3,
                         expected: Optional[int] = None) -> np.ndarray:
    """Each B-bit code c maps linearly onto [-r, r]: w = -r + 2r c / (2^B - 1)"""
    codes = weight_codes(bits, bits_per_weight)
    if expected is not None and codes.size != expected:
        raise ContractError(f"weight genome encodes {codes.size} weights, architecture needs {expected}")
    top = (1 << bits_per_weight) - 1
    return -weight_range + 2.0 * weight_range * codes / top


def quantize_weights(weights: np.ndarray, bits_per_weight: int = 4, weight_range: float = 0.3) -> np.ndarray:
    """Nearest weight codes, saturating outside [-r, r]"""
    top = (1 << bits_per_weight) - 1
    scaled = (np.asarray(weights, dtype=float) + weight_range) / (2.0 * weight_range) * top
    return np.clip(np.rint(scaled), 0, top).astype(np.int64)


def decode_arch(bits: np.ndarray, bounds: Tuple[int, int]) -> Tuple[int, Tuple[ActivationKind, ...]]:
    """Hidden count (clamped into bounds) and the activation of each used node"""
    lo, hi = bounds
    width = hidden_gene_bits(bounds)
    if len(bits) != arch_genome_length(bounds):
        raise ContractError(f"architecture genome must have {arch_genome_length(bounds)} bits, got {len(bits)}")
    hidden = min(max(bits_to_int(bits[:width]), lo), hi)
    kinds = []
    for h in range(hidden):
        start = width + h * ACTIVATION_GENE_BITS
        code = bits_to_int(bits[start:start + ACTIVATION_GENE_BITS])
        kinds.append(ACTIVATION_ALPHABET[code % len(ACTIVATION_ALPHABET)])
    return hidden, tuple(kinds)


def encode_arch(kinds: Sequence[ActivationKind], bounds: Tuple[int, int]) -> np.ndarray:
    lo, hi = bounds
    if not lo <= len(kinds) <= hi:
        raise ContractError(f"{len(kinds)} hidden nodes outside bounds {bounds}")
    genes = [int_to_bits(len(kinds), hidden_gene_bits(bounds))]
    for h in range(hi):
        code = ACTIVATION_ALPHABET.index(ActivationKind(kinds[h])) if h < len(kinds) else 0
        genes.append(int_to_bits(code, ACTIVATION_GENE_BITS))
    return np.concatenate(genes)


def decode_params(bits: np.ndarray, algorithm: str, epochs: int = 500, param_bits: int = 8):
    """Trainer config whose every field lies inside its allowed interval"""
    tag = normalize_algorithm(algorithm)
    fields = PARAM_FIELDS[tag]
    if len(bits) != param_bits * len(fields):
        raise ContractError(f"{tag} parameter genome must have {param_bits * len(fields)} bits, got {len(bits)}")
    top = (1 << param_bits) - 1
    values = {}
    for i, (name, low, high, open_low) in enumerate(fields):
        code = bits_to_int(bits[i * param_bits:(i + 1) * param_bits])
        if open_low:
            values[name] = high * (code + 1) / (top + 1)
        else:
            values[name] = min(high, low + (high - low) * code / top)
    return CONFIG_BUILDERS[tag](epochs=epochs, **values)


def random_bits(size: int, rng: np.random.Generator) -> np.ndarray:
    return rng.integers(0, 2, size=size, dtype=np.uint8)


def random_individual(algorithm: str, input_dim: int, cfg: EvolutionConfig,
                      rng: np.random.Generator) -> Individual:
    tag = normalize_algorithm(algorithm)
    arch_bits = random_bits(arch_genome_length(cfg.hidden_bounds), rng)
    hidden, _ = decode_arch(arch_bits, cfg.hidden_bounds)
    weight_bits = random_bits(weight_genome_length(input_dim, hidden, cfg.bits_per_weight), rng)
    param_bits = random_bits(param_genome_length(tag, cfg.param_bits), rng)
    return Individual(tag, arch_bits, weight_bits, param_bits)


def build_network(ind: Individual, input_dim: int, cfg: EvolutionConfig) -> Mlp:
    hidden, kinds = decode_arch(ind.arch_bits, cfg.hidden_bounds)
    weights = decode_weight_genome(ind.weight_bits, cfg.bits_per_weight, cfg.weight_range,
                                   expected=parameter_count(input_dim, hidden))
    return Mlp.from_parameters(input_dim, kinds, weights)


def describe_arch(ind: Individual, cfg: EvolutionConfig) -> str:
    """Architecture in the '8 T, 2 T*, 1 L*' form"""
    _, kinds = decode_arch(ind.arch_bits, cfg.hidden_bounds)
    return describe_counts([k.value for k in kinds])


def make_context(dataset: Dataset, cfg: EvolutionConfig) -> FitnessContext:
    if cfg.fitness_split == 'validation':
        fit, target = validation_split(dataset)
    else:
        fit, target = split(dataset)
    return FitnessContext(fit, target, dataset.input_dim, cfg)


def evaluate_fitness(ind: Individual, context: FitnessContext) -> Individual:
    """Refine the decoded network with its own algorithm and score it by RMSE on the target slice"""
    cfg = context.cfg
    scored = ind.clone()
    net = build_network(ind, context.input_dim, cfg)
    trainer_cfg = decode_params(ind.param_bits, ind.algorithm, cfg.epochs_per_eval, cfg.param_bits)
    try:
        report = train(ind.algorithm, net, context.train, trainer_cfg)
    except TrainingAborted as e:
        logger.debug(f"{ind.algorithm} individual aborted: {e}")
        scored.fitness = math.inf
        scored.trained = None
        return scored

    scored.trained = report.net
    scored.flops = report.flops
    scored.fitness = rmse(report.net, context.target)
    if cfg.lamarckian:
        codes = quantize_weights(report.weights, cfg.bits_per_weight, cfg.weight_range)
        scored.weight_bits = encode_weight_codes(codes, cfg.bits_per_weight)
    return scored


def rank_select(pop: Sequence[Individual], fraction: float) -> List[Individual]:
    """Top `fraction` of the population by ascending fitness, ties in original order"""
    if not pop:
        raise ContractError("cannot select from an empty population")
    if any(ind.fitness is None for ind in pop):
        raise ContractError("every individual must be evaluated before selection")
    ranked = sorted(pop, key=lambda ind: ind.fitness)
    count = max(1, int(math.floor(round(fraction * len(pop), 9))))
    return ranked[:count]


def flip_bits(bits: np.ndarray, probability: float, rng: np.random.Generator) -> np.ndarray:
    flips = rng.random(bits.size) < probability
    return np.where(flips, 1 - bits, bits).astype(np.uint8)


def resize_weight_genome(bits: np.ndarray, input_dim: int, old_hidden: int, new_hidden: int,
                         bits_per_weight: int, rng: np.random.Generator) -> np.ndarray:
    """Drop trailing hidden nodes or append random ones, keeping node-contiguous layout"""
    node_width = bits_per_weight * (input_dim + 1)
    nodes = bits[:old_hidden * node_width].reshape(old_hidden, node_width)
    outputs = bits[old_hidden * node_width:].reshape(old_hidden + 1, bits_per_weight)
    out_weights, out_bias = outputs[:old_hidden], outputs[old_hidden:]

    keep = min(old_hidden, new_hidden)
    extra = new_hidden - keep
    nodes = np.vstack([nodes[:keep], random_bits(extra * node_width, rng).reshape(extra, node_width)])
    out_weights = np.vstack([out_weights[:keep],
                             random_bits(extra * bits_per_weight, rng).reshape(extra, bits_per_weight)])
    return np.concatenate([nodes.ravel(), out_weights.ravel(), out_bias.ravel()]).astype(np.uint8)


def mutate(ind: Individual, rate: float, rng: np.random.Generator, input_dim: int,
           cfg: EvolutionConfig) -> Individual:
    """With probability `rate` flip each genome bit with probability 1/L, else clone"""
    if not 0 <= rate <= 1:
        raise ContractError(f"mutation rate must lie in [0, 1], got {rate}")
    if rng.random() >= rate:
        return ind.clone()

    genome = ind.genome()
    flipped = flip_bits(genome, 1.0 / genome.size, rng)
    n_arch = ind.arch_bits.size
    n_weight = ind.weight_bits.size
    arch_bits = flipped[:n_arch]
    weight_bits = flipped[n_arch:n_arch + n_weight]
    param_bits = flipped[n_arch + n_weight:]

    old_hidden, _ = decode_arch(ind.arch_bits, cfg.hidden_bounds)
    new_hidden, _ = decode_arch(arch_bits, cfg.hidden_bounds)
    if new_hidden != old_hidden:
        weight_bits = resize_weight_genome(weight_bits, input_dim, old_hidden, new_hidden,
                                           cfg.bits_per_weight, rng)
    return Individual(ind.algorithm, arch_bits, weight_bits, param_bits)


def evaluate_population(pop: List[Individual], context: FitnessContext,
                        executor: Optional[ProcessPoolExecutor] = None) -> List[Individual]:
    """Score every individual without a fitness; order is preserved"""
    pending = [i for i, ind in enumerate(pop) if ind.fitness is None]
    if not pending:
        return list(pop)
    job = partial(evaluate_fitness, context=context)
    if executor is not None:
        scored = list(executor.map(job, [pop[i] for i in pending]))
    else:
        scored = [job(pop[i]) for i in pending]
    result = list(pop)
    for i, ind in zip(pending, scored):
        result[i] = ind
    return result


def evolve_generation(pop: List[Individual], cfg: EvolutionConfig, context: FitnessContext,
                      rng: np.random.Generator,
                      executor: Optional[ProcessPoolExecutor] = None) -> List[Individual]:
    """Elites carried over unchanged; the rest refilled with mutated (or cloned) parents"""
    n = len(pop)
    ranked = sorted(pop, key=lambda ind: ind.fitness)
    elites = [ind.clone() for ind in ranked[:min(cfg.elite_count, n)]]
    parents = rank_select(pop, cfg.selection_fraction)

    offspring = []
    for _ in range(n - len(elites)):
        parent = parents[int(rng.integers(len(parents)))]
        offspring.append(mutate(parent, cfg.mutation_rate, rng, context.input_dim, cfg))
    return elites + evaluate_population(offspring, context, executor)


def generation_stats(generation: int, pop: Sequence[Individual], cfg: EvolutionConfig) -> GenerationStats:
    best = min(pop, key=lambda ind: ind.fitness)
    finite = [ind.fitness for ind in pop if math.isfinite(ind.fitness)]
    mean = float(np.mean(finite)) if finite else math.inf
    return GenerationStats(generation, best.fitness, mean, describe_arch(best, cfg))


def evolve_stream(algorithm: str, context: FitnessContext, rng: np.random.Generator,
                  executor: Optional[ProcessPoolExecutor] = None,
                  on_generation: Optional[Callable[[str, GenerationStats], None]] = None) -> StreamResult:
    cfg = context.cfg
    started = time.perf_counter()
    pop = [random_individual(algorithm, context.input_dim, cfg, rng) for _ in range(cfg.population)]
    pop = evaluate_population(pop, context, executor)
    trace = [generation_stats(0, pop, cfg)]
    if on_generation:
        on_generation(algorithm, trace[-1])

    for generation in range(1, cfg.generations + 1):
        pop = evolve_generation(pop, cfg, context, rng, executor)
        trace.append(generation_stats(generation, pop, cfg))
        if on_generation:
            on_generation(algorithm, trace[-1])

    best = min(pop, key=lambda ind: ind.fitness)
    return StreamResult(algorithm, best, trace, pop, time.perf_counter() - started)


def run_mleann(cfg: EvolutionConfig, dataset: Dataset, algorithms: Sequence[str] = ALGORITHMS,
               workers: int = 1,
               on_generation: Optional[Callable[[str, GenerationStats], None]] = None) -> Dict[str, StreamResult]:
    """Evolve one independent population per algorithm and return each stream's best of the last generation"""
    cfg.validate()
    tags = [normalize_algorithm(a) for a in algorithms]
    context = make_context(dataset, cfg)
    executor = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None

    results = {}
    try:
        for tag in tags:
            rng = np.random.default_rng([cfg.seed, ALGORITHMS.index(tag)])
            logger.info(f"Evolving {tag} stream on {dataset.name}: population {cfg.population}, "
                        f"{cfg.generations} generations, {cfg.epochs_per_eval} epochs per evaluation")
            results[tag] = evolve_stream(tag, context, rng, executor, on_generation)
            best = results[tag].best
            logger.info(f"{tag} stream best fitness {best.fitness:.6g} ({describe_arch(best, cfg)})")
    finally:
        if executor is not None:
            executor.shutdown()
    return results


def restricted(cfg: EvolutionConfig) -> EvolutionConfig:
    """Same settings with at most four hidden neurons"""
    return replace(cfg, hidden_bounds=RESTRICTED_HIDDEN)
