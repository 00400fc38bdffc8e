#include "slip/adversary.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <mutex>
#include <random>
#include <thread>

#include "slip/errors.hpp"
#include "slip/transport.hpp"

namespace slip {

namespace {

std::size_t worker_count(std::size_t requested, std::size_t jobs) {
  std::size_t n = requested;
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return std::max<std::size_t>(1, std::min(n, jobs));
}

/// Calls fn(begin, end, slot) on contiguous slices of [0, n).
template <class Fn>
void fan_out(std::size_t n, std::size_t threads, Fn&& fn) {
  const std::size_t workers = worker_count(threads, n);
  if (workers == 1) {
    fn(std::size_t{0}, n, std::size_t{0});
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr failure;
  std::mutex mu;
  const std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 0; w < workers; ++w) {
    const std::size_t begin = w * chunk;
    const std::size_t end = std::min(n, begin + chunk);
    pool.emplace_back([&, begin, end, w] {
      try {
        fn(begin, end, w);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::uint32_t parse_u32(const std::string& s, const std::string& whole) {
  try {
    std::size_t used = 0;
    const unsigned long v = std::stoul(s, &used);
    if (used == s.size()) return static_cast<std::uint32_t>(v);
  } catch (const std::exception&) {
  }
  throw Error("bad number '" + s + "' in strategy '" + whole + "'");
}

std::uint32_t strategy_layer(const CheatStrategy& s) {
  return std::visit(
      [](const auto& v) -> std::uint32_t {
        if constexpr (std::is_same_v<std::decay_t<decltype(v)>, HonestPlay>)
          return 0;
        else
          return v.layer;
      },
      s);
}

}  // namespace

std::string strategy_name(const CheatStrategy& s) {
  return std::visit(
      [](const auto& v) -> std::string {
        using T = std::decay_t<decltype(v)>;
        if constexpr (std::is_same_v<T, HonestPlay>) {
          return "honest";
        } else if constexpr (std::is_same_v<T, AdditiveNoise>) {
          return "noise:" + std::to_string(v.layer);
        } else if constexpr (std::is_same_v<T, RandomReply>) {
          return "random:" + std::to_string(v.layer);
        } else {
          return "flip:" + std::to_string(v.layer) + ":" +
                 std::to_string(v.index) + ":" + std::to_string(v.offset);
        }
      },
      s);
}

CheatStrategy parse_strategy(const std::string& text) {
  std::vector<std::string> parts;
  std::size_t start = 0;
  while (true) {
    const auto colon = text.find(':', start);
    parts.push_back(text.substr(start, colon - start));
    if (colon == std::string::npos) break;
    start = colon + 1;
  }
  const std::string& kind = parts[0];
  if (kind == "honest" && parts.size() == 1) return HonestPlay{};
  if (parts.size() < 2) throw Error("strategy '" + text + "' needs a layer");
  const std::uint32_t layer = parse_u32(parts[1], text);
  if (layer == 0) throw Error("strategy layers are 1-based");
  if (kind == "noise" && parts.size() == 2) return AdditiveNoise{layer, {}};
  if (kind == "random" && parts.size() == 2) return RandomReply{layer};
  if (kind == "flip" && parts.size() <= 4) {
    CoordinateFlip f{layer, 0, 1};
    if (parts.size() > 2) f.index = parse_u32(parts[2], text);
    if (parts.size() > 3) f.offset = parse_u32(parts[3], text);
    return f;
  }
  throw Error("unknown strategy '" + text + "'");
}

DavidState::ReplyHook make_hook(CheatPlan plan, Rng rng) {
  std::vector<std::uint32_t> seen;
  for (const auto& s : plan) {
    const std::uint32_t layer = strategy_layer(s);
    if (layer == 0) continue;
    if (std::find(seen.begin(), seen.end(), layer) != seen.end()) {
      throw Error("layer " + std::to_string(layer) + " is tampered twice");
    }
    seen.push_back(layer);
  }
  return [plan = std::move(plan), rng](const DavidState& state,
                                       std::uint32_t layer,
                                       FieldVector y) mutable {
    const PrimeField& field = state.parts().field;
    for (const auto& s : plan) {
      if (strategy_layer(s) != layer) continue;
      if (const auto* noise = std::get_if<AdditiveNoise>(&s)) {
        FieldVector delta = noise->delta;
        if (delta.empty()) {
          do {
            delta = uniform_vector(field, y.size(), rng);
          } while (std::all_of(delta.begin(), delta.end(),
                               [](Residue e) { return e == 0; }));
        }
        if (delta.size() != y.size()) {
          throw DimensionError("noise length does not match layer " +
                               std::to_string(layer));
        }
        y = add(field, y, delta);
      } else if (std::holds_alternative<RandomReply>(s)) {
        y = uniform_vector(field, y.size(), rng);
      } else if (const auto* flip = std::get_if<CoordinateFlip>(&s)) {
        if (flip->index >= y.size()) {
          throw DimensionError("flip index out of range for layer " +
                               std::to_string(layer));
        }
        y[flip->index] = field.add(y[flip->index], flip->offset % field.modulus());
      }
    }
    return y;
  };
}

Testbed::Testbed(MlpModel m, std::span<const std::size_t> ranks,
                 const FixedPointCodec& codec)
    : model(std::move(m)),
      decomposition(decompose(model, ranks, codec)),
      parts(DavidParts::from(decomposition)),
      oracle(model, codec) {}

FieldVector trial_input(const Testbed& bed, std::uint64_t seed,
                        std::uint64_t index, double scale) {
  const FixedPointCodec& codec = bed.decomposition.codec;
  Rng rng = substream(seed, "inputs", index);
  const std::size_t n = bed.model.input_width();
  if (codec.policy() == BudgetPolicy::kWrap) {
    return uniform_vector(codec.field(), n, rng);
  }
  std::uniform_real_distribution<double> u(-scale, scale);
  std::vector<double> x(n);
  for (double& v : x) v = u(rng);
  return codec.encode(x);
}

const char* outcome_name(CheatOutcome o) {
  switch (o) {
    case CheatOutcome::kAcceptedCorrect:
      return "accepted-correct";
    case CheatOutcome::kAcceptedWrong:
      return "accepted-wrong";
    case CheatOutcome::kAborted:
      return "aborted";
  }
  return "?";
}

CheatOutcome run_with_cheat(const Testbed& bed, std::span<const Residue> input,
                            MaskSet& masks, const CheatPlan& plan, Rng rng) {
  InProcTransport channel(bed.parts, make_hook(plan, std::move(rng)));
  SessionResult r;
  try {
    r = run_protocol(bed.decomposition, Mode::kMalicious, input, masks, channel);
  } catch (const OverflowError&) {
    return CheatOutcome::kAcceptedWrong;
  }
  if (r.outcome.aborted) return CheatOutcome::kAborted;
  const QuantizedTrace truth = infer_quantized_field(bed.oracle, input);
  return r.outcome.output == truth.field_output() ? CheatOutcome::kAcceptedCorrect
                                                  : CheatOutcome::kAcceptedWrong;
}

double DetectionReport::abort_rate() const {
  return trials ? static_cast<double>(aborted) / static_cast<double>(trials) : 0;
}

double DetectionReport::accept_wrong_rate() const {
  return trials ? static_cast<double>(accepted_wrong) / static_cast<double>(trials)
                : 0;
}

double DetectionReport::wrong_given_accept() const {
  const std::uint64_t accepted = trials - aborted;
  return accepted ? static_cast<double>(accepted_wrong) /
                        static_cast<double>(accepted)
                  : 0;
}

stats::Interval DetectionReport::abort_ci() const {
  return stats::wilson(aborted, trials);
}

stats::Interval DetectionReport::accept_wrong_ci() const {
  return stats::wilson(accepted_wrong, trials);
}

stats::Interval DetectionReport::wrong_given_accept_ci() const {
  return stats::wilson(accepted_wrong, trials - aborted);
}

double DetectionReport::per_layer_rate() const {
  return std::pow(static_cast<double>(modulus), -static_cast<double>(check_count));
}

double DetectionReport::union_bound() const {
  return static_cast<double>(layers) * per_layer_rate();
}

nlohmann::json DetectionReport::to_json() const {
  auto ci = [](stats::Interval i) { return nlohmann::json::array({i.lo, i.hi}); };
  return {
      {"strategy", strategy},
      {"modulus", modulus},
      {"check_count", check_count},
      {"layers", layers},
      {"trials", trials},
      {"aborted", aborted},
      {"accepted_wrong", accepted_wrong},
      {"accepted_correct", accepted_correct},
      {"abort_rate", abort_rate()},
      {"abort_ci95", ci(abort_ci())},
      {"accept_wrong_rate", accept_wrong_rate()},
      {"accept_wrong_ci95", ci(accept_wrong_ci())},
      {"wrong_given_accept", wrong_given_accept()},
      {"wrong_given_accept_ci95", ci(wrong_given_accept_ci())},
      {"per_layer_rate", per_layer_rate()},
      {"union_bound", union_bound()},
  };
}

DetectionReport estimate_detection(const Testbed& bed, const CheatPlan& plan,
                                   const DetectionConfig& cfg) {
  if (cfg.trials < 1000) throw Error("detection estimates need at least 1000 trials");
  if (cfg.check_count == 0) throw Error("detection needs check_count >= 1");
  struct Tally {
    std::uint64_t aborted = 0, wrong = 0, correct = 0;
  };
  const std::size_t workers = worker_count(cfg.threads, cfg.trials);
  std::vector<Tally> tallies(workers);
  fan_out(cfg.trials, workers, [&](std::size_t begin, std::size_t end, std::size_t slot) {
    Tally& t = tallies[slot];
    for (std::size_t trial = begin; trial < end; ++trial) {
      MaskSet masks = precompute_one(bed.decomposition, Mode::kMalicious,
                                     cfg.check_count, cfg.seed, trial);
      const FieldVector x = trial_input(bed, cfg.seed, trial, cfg.input_scale);
      switch (run_with_cheat(bed, x, masks, plan,
                             substream(cfg.seed, "adversary", trial))) {
        case CheatOutcome::kAborted:
          ++t.aborted;
          break;
        case CheatOutcome::kAcceptedWrong:
          ++t.wrong;
          break;
        case CheatOutcome::kAcceptedCorrect:
          ++t.correct;
          break;
      }
    }
  });
  DetectionReport rep;
  for (const auto& s : plan) {
    if (!rep.strategy.empty()) rep.strategy += "+";
    rep.strategy += strategy_name(s);
  }
  if (rep.strategy.empty()) rep.strategy = "honest";
  rep.modulus = bed.decomposition.codec.field().modulus();
  rep.check_count = cfg.check_count;
  rep.layers = bed.decomposition.layer_count();
  rep.trials = cfg.trials;
  for (const Tally& t : tallies) {
    rep.aborted += t.aborted;
    rep.accepted_wrong += t.wrong;
    rep.accepted_correct += t.correct;
  }
  return rep;
}

std::vector<FieldVector> david_inputs(const Transcript& david) {
  std::vector<FieldVector> out;
  for (const auto& [dir, msg] : david.entries) {
    if (dir != Direction::kCharlieToDavid) continue;
    if (const auto* in = std::get_if<LayerInput>(&msg)) out.push_back(in->values);
  }
  return out;
}

SimulatedView simulate_view(std::span<const Residue> input,
                            std::span<const Residue> output,
                            const DavidParts& parts, Rng& rng) {
  if (parts.weights.empty() || input.size() != parts.dims.front() ||
      output.size() != parts.dims.back()) {
    throw DimensionError("simulate_view: input/output lengths do not match dims");
  }
  SimulatedView view;
  view.parts = &parts;
  view.inputs.emplace_back(input.begin(), input.end());
  for (std::size_t i = 1; i < parts.weights.size(); ++i)
    view.inputs.push_back(uniform_vector(parts.field, parts.dims[i], rng));
  view.output.assign(output.begin(), output.end());
  return view;
}

ViewHistogram::ViewHistogram(Residue modulus, std::span<const std::size_t> dims)
    : modulus_(modulus) {
  if (modulus > kMaxHistogramModulus) {
    throw Error("view histograms need p <= " + std::to_string(kMaxHistogramModulus));
  }
  if (dims.size() < 3) throw DimensionError("no masked layers to histogram");
  widths_.assign(dims.begin() + 1, dims.end() - 1);
  std::size_t total = 0;
  for (std::size_t w : widths_) total += w;
  counts_.assign(total, std::vector<std::uint64_t>(modulus, 0));
}

void ViewHistogram::add(std::span<const FieldVector> inputs) {
  if (inputs.size() != widths_.size() + 1) {
    throw DimensionError("view has " + std::to_string(inputs.size()) +
                         " layer inputs, expected " +
                         std::to_string(widths_.size() + 1));
  }
  std::size_t c = 0;
  for (std::size_t i = 0; i < widths_.size(); ++i) {
    const FieldVector& v = inputs[i + 1];
    if (v.size() != widths_[i]) throw DimensionError("view width mismatch");
    for (Residue e : v) {
      if (e >= modulus_) throw FormatError("residue out of range in view");
      ++counts_[c++][e];
    }
  }
  ++samples_;
}

void ViewHistogram::merge(const ViewHistogram& other) {
  if (other.modulus_ != modulus_ || other.widths_ != widths_) {
    throw DimensionError("cannot merge histograms of different shapes");
  }
  for (std::size_t c = 0; c < counts_.size(); ++c)
    for (std::size_t b = 0; b < counts_[c].size(); ++b)
      counts_[c][b] += other.counts_[c][b];
  samples_ += other.samples_;
}

nlohmann::json UniformityReport::to_json() const {
  return {{"pooled_statistic", pooled_statistic},
          {"pooled_dof", pooled_dof},
          {"pooled_p_value", pooled_p_value},
          {"min_coordinate_p_value", min_p_value},
          {"coordinate_p_values", coordinate_p_values}};
}

UniformityReport uniformity(const ViewHistogram& h) {
  UniformityReport rep;
  for (std::size_t c = 0; c < h.coordinates(); ++c) {
    const auto t = stats::chi_square_uniform(h.coordinate(c));
    rep.coordinate_p_values.push_back(t.p_value);
    rep.pooled_statistic += t.statistic;
    rep.pooled_dof += t.dof;
    rep.min_p_value = std::min(rep.min_p_value, t.p_value);
  }
  rep.pooled_p_value = stats::chi_square_sf(rep.pooled_statistic, rep.pooled_dof);
  return rep;
}

nlohmann::json DistinguishReport::to_json() const {
  return {{"samples", samples},
          {"real", real.to_json()},
          {"simulated", simulated.to_json()},
          {"tv_real_vs_sim", tv_real_vs_sim},
          {"tv_max_real_vs_sim", tv_max_real_vs_sim},
          {"tv_null", tv_null},
          {"tv_band", tv_band},
          {"real_within_band", real_within_band()},
          {"null_within_band", null_within_band()}};
}

DistinguishReport distinguish_views(const ViewHistogram& real,
                                    const ViewHistogram& simulated,
                                    const ViewHistogram& simulated_null) {
  if (real.samples() != simulated.samples() ||
      real.samples() != simulated_null.samples()) {
    throw Error("distinguish_views needs equal sample counts");
  }
  if (real.coordinates() != simulated.coordinates() ||
      real.coordinates() != simulated_null.coordinates()) {
    throw DimensionError("views have different shapes");
  }
  DistinguishReport rep;
  rep.samples = real.samples();
  rep.real = uniformity(real);
  rep.simulated = uniformity(simulated);
  const double n = static_cast<double>(real.coordinates());
  for (std::size_t c = 0; c < real.coordinates(); ++c) {
    const double tv = stats::total_variation(real.coordinate(c), simulated.coordinate(c));
    rep.tv_real_vs_sim += tv / n;
    rep.tv_max_real_vs_sim = std::max(rep.tv_max_real_vs_sim, tv);
    rep.tv_null += stats::total_variation(simulated.coordinate(c),
                                          simulated_null.coordinate(c)) / n;
  }
  rep.tv_band = std::sqrt(static_cast<double>(real.modulus()) /
                          (2.0 * static_cast<double>(rep.samples)));
  return rep;
}

DistinguishReport view_experiment(const Testbed& bed, Mode mode,
                                  const ViewExperiment& cfg) {
  const Decomposition& d = bed.decomposition;
  const Residue p = d.codec.field().modulus();
  const std::vector<std::size_t> dims = d.dims();
  const std::size_t checks = mode == Mode::kMalicious ? 1 : 0;
  const std::size_t workers = worker_count(cfg.threads, cfg.sessions);
  std::vector<ViewHistogram> real(workers, ViewHistogram(p, dims));
  std::vector<ViewHistogram> sim(workers, ViewHistogram(p, dims));
  std::vector<ViewHistogram> null(workers, ViewHistogram(p, dims));
  fan_out(cfg.sessions, workers, [&](std::size_t begin, std::size_t end, std::size_t slot) {
    for (std::size_t s = begin; s < end; ++s) {
      const FieldVector x = trial_input(bed, cfg.seed, s);
      MaskSet masks = precompute_one(d, mode, checks, cfg.seed, s);
      InProcTransport channel(bed.parts);
      const SessionResult r = run_protocol(d, mode, x, masks, channel);
      real[slot].add(david_inputs(*r.david));

      const QuantizedTrace truth = infer_quantized_field(bed.oracle, x);
      Rng a = substream(cfg.seed, "simulator", s);
      Rng b = substream(cfg.seed, "simulator-null", s);
      sim[slot].add(simulate_view(x, truth.field_output(), bed.parts, a).inputs);
      null[slot].add(simulate_view(x, truth.field_output(), bed.parts, b).inputs);
    }
  });
  for (std::size_t w = 1; w < workers; ++w) {
    real[0].merge(real[w]);
    sim[0].merge(sim[w]);
    null[0].merge(null[w]);
  }
  return distinguish_views(real[0], sim[0], null[0]);
}

std::vector<Observation> layer_observations(std::span<const Transcript> david,
                                            std::uint32_t layer) {
  std::vector<Observation> out;
  for (const Transcript& t : david) {
    Observation obs;
    bool have_input = false;
    bool have_output = false;
    for (const auto& [dir, msg] : t.entries) {
      if (dir != Direction::kCharlieToDavid) continue;
      if (const auto* in = std::get_if<LayerInput>(&msg)) {
        if (in->layer == layer) {
          obs.input = in->values;
          have_input = true;
        } else if (in->layer == layer + 1) {
          obs.output = in->values;
          have_output = true;
        }
      } else if (const auto* fin = std::get_if<FinalOutput>(&msg)) {
        if (fin->layer == layer) {
          obs.output = fin->values;
          have_output = true;
        }
      }
    }
    if (have_input && have_output) out.push_back(std::move(obs));
  }
  return out;
}

FieldMatrix solve_layer(const PrimeField& field,
                        std::span<const Observation> observations) {
  if (observations.empty()) throw SingularSystemError("no observations");
  const std::size_t in = observations.front().input.size();
  const std::size_t out = observations.front().output.size();
  const std::size_t width = in + out;
  std::vector<FieldVector> rows;
  rows.reserve(observations.size());
  for (const Observation& o : observations) {
    if (o.input.size() != in || o.output.size() != out) {
      throw DimensionError("observations have inconsistent lengths");
    }
    FieldVector r = o.input;
    r.insert(r.end(), o.output.begin(), o.output.end());
    rows.push_back(std::move(r));
  }
  // Reduced row echelon form on the input columns.
  for (std::size_t col = 0; col < in; ++col) {
    std::size_t pivot = col;
    while (pivot < rows.size() && rows[pivot][col] == 0) ++pivot;
    if (pivot == rows.size()) {
      throw SingularSystemError(
          "observed inputs do not span the layer input space; " +
          std::to_string(rows.size()) + " queries for width " +
          std::to_string(in) + ", more queries needed");
    }
    std::swap(rows[col], rows[pivot]);
    const Residue inv = field.inv(rows[col][col]);
    for (Residue& e : rows[col]) e = field.mul(e, inv);
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (r == col || rows[r][col] == 0) continue;
      const Residue factor = rows[r][col];
      for (std::size_t c = col; c < width; ++c)
        rows[r][c] = field.sub(rows[r][c], field.mul(factor, rows[col][c]));
    }
  }
  FieldMatrix w(out, in);
  for (std::size_t j = 0; j < in; ++j)
    for (std::size_t o = 0; o < out; ++o) w(o, j) = rows[j][in + o];
  return w;
}

nlohmann::json RecoveryReport::to_json() const {
  return {{"layer", layer},
          {"exact_match", exact_match},
          {"held_out", held_out},
          {"held_out_mismatches", held_out_mismatches}};
}

RecoveryReport linear_recovery_attack(const PrimeField& field,
                                      std::span<const Transcript> training,
                                      std::span<const Transcript> held_out,
                                      std::uint32_t layer,
                                      const FieldMatrix& david_part,
                                      const FieldMatrix& truth) {
  const auto train = layer_observations(training, layer);
  RecoveryReport rep;
  rep.layer = layer;
  rep.weights = solve_layer(field, train);
  if (rep.weights.rows() != david_part.rows() ||
      rep.weights.cols() != david_part.cols()) {
    throw DimensionError("recovered matrix does not match David's part");
  }
  rep.charlie_part = sub(field, rep.weights, david_part);
  for (const Observation& o : layer_observations(held_out, layer)) {
    ++rep.held_out;
    if (matvec(field, rep.weights, o.input) != o.output) ++rep.held_out_mismatches;
  }
  rep.exact_match = rep.weights == truth;
  return rep;
}

RecoveryReport recovery_experiment(const Testbed& bed, Mode mode,
                                   const RecoveryExperiment& cfg) {
  const Decomposition& d = bed.decomposition;
  if (cfg.layer == 0 || cfg.layer > d.layer_count()) {
    throw Error("layer " + std::to_string(cfg.layer) + " out of range");
  }
  const std::size_t queries =
      cfg.queries ? cfg.queries : d.dims()[cfg.layer - 1];
  auto collect = [&](std::size_t begin, std::size_t count) {
    std::vector<Transcript> out;
    for (std::size_t s = begin; s < begin + count; ++s) {
      const FieldVector x = trial_input(bed, cfg.seed, s, cfg.input_scale);
      MaskSet masks = precompute_one(d, mode, mode == Mode::kMalicious ? 1 : 0,
                                     cfg.seed, s);
      InProcTransport channel(bed.parts);
      out.push_back(*run_protocol(d, mode, x, masks, channel).david);
    }
    return out;
  };
  const auto training = collect(0, queries);
  const auto held = collect(queries, cfg.held_out);
  const std::size_t i = cfg.layer - 1;
  return linear_recovery_attack(d.codec.field(), training, held, cfg.layer,
                                d.layers[i].david_field, bed.oracle.weights(i));
}

}  // namespace slip
