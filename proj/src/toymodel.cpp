#include "model_tailor/toymodel.hpp"

#include <zlib.h>

#include <cmath>
#include <numbers>

#include "model_tailor/error.hpp"

namespace model_tailor::toy {

namespace {

struct Teacher {
  linalg::Matrix w1;  // hidden × (d_in + 1)
  linalg::Matrix w2;  // d_out × (hidden + 1)
};

linalg::Matrix gaussian_matrix(std::mt19937_64& rng, std::size_t rows, std::size_t cols, double stddev) {
  linalg::Matrix m(rows, cols);
  for (double& v : m.data()) v = stddev * standard_normal(rng);
  return m;
}

/// y = W·[x; 1]
void affine(const linalg::Matrix& w, std::span<const double> x, std::span<double> y) {
  const std::size_t in = w.cols() - 1;
  for (std::size_t i = 0; i < w.rows(); ++i) {
    const auto wr = w.row(i);
    double s = 0.0;
    for (std::size_t j = 0; j < in; ++j) s += wr[j] * x[j];
    y[i] = s + wr[in];
  }
}

std::vector<linalg::Matrix> weights_of(const Checkpoint& ckpt) {
  const auto names = layer_names(ckpt);
  std::vector<linalg::Matrix> ws;
  ws.reserve(names.size());
  for (const auto& n : names) ws.push_back(ckpt.at(n).to_matrix());
  return ws;
}

/// Activations of every layer for one sample: acts[0] = x, acts[ℓ+1] = output of layer ℓ.
void forward_sample(const std::vector<linalg::Matrix>& ws, std::span<const double> x,
                    std::vector<std::vector<double>>& acts) {
  acts.resize(ws.size() + 1);
  acts[0].assign(x.begin(), x.end());
  for (std::size_t l = 0; l < ws.size(); ++l) {
    acts[l + 1].resize(ws[l].rows());
    affine(ws[l], acts[l], acts[l + 1]);
    if (l + 1 < ws.size()) {
      for (double& v : acts[l + 1]) v = std::tanh(v);
    }
  }
}

void require_compatible(const std::vector<std::size_t>& widths, const TaskDataset& data) {
  if (widths.front() != data.inputs.cols() || widths.back() != data.targets.cols()) {
    throw Error(ErrorCode::Shape, "model widths do not match dataset '" + data.task_id + "' dimensions");
  }
}

}  // namespace

std::mt19937_64 make_engine(const std::string& label, std::uint64_t seed) {
  const auto crc = static_cast<std::uint32_t>(
      crc32(crc32(0L, Z_NULL, 0), reinterpret_cast<const Bytef*>(label.data()), static_cast<uInt>(label.size())));
  std::seed_seq seq{crc, static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(label.size())};
  return std::mt19937_64(seq);
}

double standard_normal(std::mt19937_64& rng) {
  constexpr double kScale = 0x1.0p-53;
  const double u1 = (static_cast<double>(rng() >> 11) + 1.0) * kScale;  // (0, 1]
  const double u2 = static_cast<double>(rng() >> 11) * kScale;          // [0, 1)
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

void MlpSpec::validate() const {
  if (widths.size() < 3) throw Error(ErrorCode::InvalidArgument, "an MLP needs at least two layers");
  for (auto w : widths) {
    if (w == 0) throw Error(ErrorCode::InvalidArgument, "layer widths must be positive");
  }
}

std::string layer_name(std::size_t index) { return "layer" + std::to_string(index); }

Checkpoint init_mlp(const MlpSpec& spec) {
  spec.validate();
  auto rng = make_engine("mlp-init", spec.seed);
  Checkpoint c;
  std::string widths;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t in = spec.widths[l];
    const std::size_t out = spec.widths[l + 1];
    linalg::Matrix w = gaussian_matrix(rng, out, in + 1, 1.0 / std::sqrt(static_cast<double>(in)));
    for (std::size_t i = 0; i < out; ++i) w(i, in) = 0.0;
    c.add(layer_name(l), Tensor::from_matrix(w));
  }
  for (std::size_t i = 0; i < spec.widths.size(); ++i) widths += (i ? "," : "") + std::to_string(spec.widths[i]);
  c.metadata = {{"activation", "tanh"},
                {"model_id", "mlp-" + widths + "-seed" + std::to_string(spec.seed)},
                {"stage", "init"},
                {"widths", widths}};
  return c;
}

std::vector<std::string> layer_names(const Checkpoint& ckpt) {
  std::vector<std::string> names;
  for (std::size_t l = 0; ckpt.contains(layer_name(l)); ++l) names.push_back(layer_name(l));
  if (names.size() < 2) throw Error(ErrorCode::Shape, "checkpoint does not hold an MLP with at least two layers");
  return names;
}

std::vector<std::size_t> widths_of(const Checkpoint& ckpt) {
  const auto names = layer_names(ckpt);
  std::vector<std::size_t> widths;
  for (const auto& n : names) {
    const auto& t = ckpt.at(n);
    if (t.shape.size() != 2 || t.shape[1] < 2) throw Error(ErrorCode::Shape, "layer '" + n + "' has a bad shape");
    const std::size_t in = t.shape[1] - 1;
    if (widths.empty()) {
      widths.push_back(in);
    } else if (widths.back() != in) {
      throw Error(ErrorCode::Shape, "layer '" + n + "' input width does not chain");
    }
    widths.push_back(t.shape[0]);
  }
  return widths;
}

linalg::Matrix forward(const Checkpoint& ckpt, const linalg::Matrix& inputs) {
  const auto widths = widths_of(ckpt);
  if (inputs.cols() != widths.front()) throw Error(ErrorCode::Shape, "input width does not match the model");
  const auto ws = weights_of(ckpt);
  linalg::Matrix out(inputs.rows(), widths.back());
  std::vector<std::vector<double>> acts;
  for (std::size_t r = 0; r < inputs.rows(); ++r) {
    forward_sample(ws, inputs.row(r), acts);
    std::copy(acts.back().begin(), acts.back().end(), out.row(r).begin());
  }
  return out;
}

std::vector<std::size_t> TaskDataset::rows(Split tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < split.size(); ++i) {
    if (split[i] == tag) out.push_back(i);
  }
  return out;
}

TaskDataset gen_task(const std::string& task_id, std::uint64_t seed, std::size_t n, const TaskShape& shape) {
  if (n == 0) throw Error(ErrorCode::InvalidArgument, "a dataset needs at least one sample");
  if (shape.d_in == 0 || shape.d_out == 0 || shape.teacher_hidden == 0) {
    throw Error(ErrorCode::InvalidArgument, "task dimensions must be positive");
  }
  auto teacher_rng = make_engine("teacher/" + task_id, seed);
  Teacher t;
  t.w1 = gaussian_matrix(teacher_rng, shape.teacher_hidden, shape.d_in + 1,
                         1.5 / std::sqrt(static_cast<double>(shape.d_in)));
  t.w2 = gaussian_matrix(teacher_rng, shape.d_out, shape.teacher_hidden + 1,
                         1.0 / std::sqrt(static_cast<double>(shape.teacher_hidden)));

  auto data_rng = make_engine("inputs/" + task_id, seed);
  TaskDataset d;
  d.task_id = task_id;
  d.seed = seed;
  d.inputs = linalg::Matrix(n, shape.d_in);
  d.targets = linalg::Matrix(n, shape.d_out);
  d.split.resize(n);
  std::vector<double> hidden(shape.teacher_hidden);
  for (std::size_t r = 0; r < n; ++r) {
    auto x = d.inputs.row(r);
    for (double& v : x) v = standard_normal(data_rng);
    affine(t.w1, x, hidden);
    for (double& v : hidden) v = std::tanh(v);
    auto y = d.targets.row(r);
    affine(t.w2, hidden, y);
    for (double& v : y) v += shape.noise * standard_normal(data_rng);
    d.split[r] = r % 5 == 4 ? Split::Eval : Split::Train;
  }
  return d;
}

Checkpoint dataset_to_checkpoint(const TaskDataset& data) {
  Checkpoint c;
  c.metadata = {{"kind", "dataset"}, {"seed", std::to_string(data.seed)}, {"task_id", data.task_id}};
  c.add("inputs", Tensor::from_matrix(data.inputs));
  c.add("targets", Tensor::from_matrix(data.targets));
  std::vector<double> split;
  for (auto s : data.split) split.push_back(s == Split::Eval ? 1.0 : 0.0);
  c.add("split", Tensor::vector(std::move(split)));
  return c;
}

TaskDataset dataset_from_checkpoint(const Checkpoint& ckpt) {
  auto it = ckpt.metadata.find("kind");
  if (it == ckpt.metadata.end() || it->second != "dataset") {
    throw Error(ErrorCode::InvalidArgument, "container is not a dataset");
  }
  TaskDataset d;
  d.task_id = ckpt.metadata.at("task_id");
  d.seed = std::stoull(ckpt.metadata.at("seed"));
  d.inputs = ckpt.at("inputs").to_matrix();
  d.targets = ckpt.at("targets").to_matrix();
  const auto& split = ckpt.at("split").data;
  if (d.inputs.rows() != d.targets.rows() || split.size() != d.inputs.rows()) {
    throw Error(ErrorCode::Shape, "dataset row counts disagree");
  }
  for (double v : split) d.split.push_back(v != 0.0 ? Split::Eval : Split::Train);
  return d;
}

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
    throw Error(ErrorCode::InvalidArgument, "learning rate must be positive");
  }
  if (batch_size == 0) throw Error(ErrorCode::InvalidArgument, "batch size must be positive");
}

double mse(const Checkpoint& ckpt, const TaskDataset& data, const std::vector<std::size_t>& rows) {
  const auto widths = widths_of(ckpt);
  require_compatible(widths, data);
  const auto ws = weights_of(ckpt);
  std::vector<std::vector<double>> acts;
  const std::size_t count = rows.empty() ? data.size() : rows.size();
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const std::size_t r = rows.empty() ? i : rows[i];
    forward_sample(ws, data.inputs.row(r), acts);
    const auto t = data.targets.row(r);
    for (std::size_t k = 0; k < t.size(); ++k) {
      const double e = acts.back()[k] - t[k];
      total += e * e;
    }
  }
  return total / static_cast<double>(count * data.targets.cols());
}

double evaluate(const Checkpoint& ckpt, const TaskDataset& data) {
  return 100.0 / (1.0 + mse(ckpt, data, data.rows(Split::Eval)));
}

TrainResult train(const Checkpoint& init, const TaskDataset& data, const TrainConfig& cfg) {
  cfg.validate();
  const auto widths = widths_of(init);
  require_compatible(widths, data);
  TrainResult result{init, {}};
  if (cfg.epochs == 0) return result;

  auto order = data.rows(Split::Train);
  if (order.empty()) throw Error(ErrorCode::InvalidArgument, "dataset '" + data.task_id + "' has no training rows");
  auto ws = weights_of(init);
  const auto names = layer_names(init);
  std::vector<linalg::Matrix> grads;
  for (const auto& w : ws) grads.emplace_back(w.rows(), w.cols());

  auto rng = make_engine("train/" + data.task_id, cfg.seed);
  std::vector<std::vector<double>> acts;
  std::vector<double> delta;
  std::vector<double> next_delta;
  const double k_out = static_cast<double>(data.targets.cols());

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);

    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + cfg.batch_size);
      const double norm = 2.0 / (static_cast<double>(stop - start) * k_out);
      for (auto& g : grads) std::fill(g.data().begin(), g.data().end(), 0.0);

      for (std::size_t b = start; b < stop; ++b) {
        const std::size_t r = order[b];
        forward_sample(ws, data.inputs.row(r), acts);
        const auto t = data.targets.row(r);
        delta.resize(t.size());
        for (std::size_t k = 0; k < t.size(); ++k) delta[k] = norm * (acts.back()[k] - t[k]);

        for (std::size_t l = ws.size(); l-- > 0;) {
          const auto& a_in = acts[l];
          const std::size_t in = a_in.size();
          auto& g = grads[l];
          for (std::size_t o = 0; o < delta.size(); ++o) {
            auto gr = g.row(o);
            for (std::size_t j = 0; j < in; ++j) gr[j] += delta[o] * a_in[j];
            gr[in] += delta[o];
          }
          if (l == 0) break;
          next_delta.assign(in, 0.0);
          for (std::size_t o = 0; o < delta.size(); ++o) {
            const auto wr = ws[l].row(o);
            for (std::size_t j = 0; j < in; ++j) next_delta[j] += wr[j] * delta[o];
          }
          for (std::size_t j = 0; j < in; ++j) next_delta[j] *= 1.0 - a_in[j] * a_in[j];
          delta.swap(next_delta);
        }
      }
      for (std::size_t l = 0; l < ws.size(); ++l) {
        auto wd = ws[l].data();
        const auto gd = grads[l].data();
        for (std::size_t i = 0; i < wd.size(); ++i) wd[i] -= cfg.learning_rate * gd[i];
      }
    }

    for (std::size_t l = 0; l < ws.size(); ++l) {
      auto& t = result.model.tensors.at(names[l]);
      t.data = ws[l].values();
    }
    const double loss = mse(result.model, data, data.rows(Split::Train));
    if (!std::isfinite(loss)) {
      throw Error(ErrorCode::Divergence, "training loss became non-finite at epoch " + std::to_string(epoch));
    }
    result.epoch_losses.push_back(loss);
  }
  return result;
}

CalibrationSet capture_activations(const Checkpoint& ckpt, const TaskDataset& data, std::size_t n_calib) {
  if (n_calib == 0) throw Error(ErrorCode::InvalidArgument, "n_calib must be at least 1");
  const auto widths = widths_of(ckpt);
  require_compatible(widths, data);
  const auto rows = data.rows(Split::Train);
  if (n_calib > rows.size()) {
    throw Error(ErrorCode::InvalidArgument, "n_calib " + std::to_string(n_calib) + " exceeds " +
                                                std::to_string(rows.size()) + " training rows");
  }
  const auto ws = weights_of(ckpt);
  const auto names = layer_names(ckpt);
  CalibrationSet out;
  for (std::size_t l = 0; l < ws.size(); ++l) {
    out.emplace(names[l], CalibrationRecord{names[l], linalg::Matrix(widths[l] + 1, n_calib)});
  }
  std::vector<std::vector<double>> acts;
  for (std::size_t s = 0; s < n_calib; ++s) {
    forward_sample(ws, data.inputs.row(rows[s]), acts);
    for (std::size_t l = 0; l < ws.size(); ++l) {
      auto& x = out.at(names[l]).x;
      for (std::size_t j = 0; j < widths[l]; ++j) x(j, s) = acts[l][j];
      x(widths[l], s) = 1.0;
    }
  }
  return out;
}

}  // namespace model_tailor::toy
