#include "ads/model.hpp"

#include <Eigen/Core>
#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "ads/hashing.hpp"
#include "ads/rng.hpp"
#include "ads/threading.hpp"

namespace ads {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<Mat>;
using CMatMap = Eigen::Map<const Mat>;

constexpr double kLnEps = 1e-5;

CMatMap param_mat(const ParamVector& pv, const std::string& name) {
  const auto& e = pv.entry(name);
  const int64_t r = e.shape[0];
  const int64_t c = e.shape.size() > 1 ? e.shape[1] : 1;
  return CMatMap(pv.values().data() + e.offset, r, c);
}

void layer_norm_rows(Mat& x, std::span<const double> gain, std::span<const double> bias) {
  const int64_t n = x.rows(), d = x.cols();
  for (int64_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (int64_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (int64_t j = 0; j < d; ++j) {
      const double c = x(i, j) - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double r = 1.0 / std::sqrt(var + kLnEps);
    for (int64_t j = 0; j < d; ++j)
      x(i, j) = gain[static_cast<size_t>(j)] * (x(i, j) - mean) * r + bias[static_cast<size_t>(j)];
  }
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
  if (d_model <= 0 || n_layers < 0 || n_heads <= 0 || d_ff <= 0 || max_seq_len <= 0)
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  if (d_model % n_heads != 0)
    throw std::invalid_argument("ModelConfig: n_heads must divide d_model");
}

std::string ModelConfig::to_json() const {
  nlohmann::ordered_json j;
  j["vocab_size"] = vocab_size;
  j["d_model"] = d_model;
  j["n_layers"] = n_layers;
  j["n_heads"] = n_heads;
  j["d_ff"] = d_ff;
  j["max_seq_len"] = max_seq_len;
  j["init_seed"] = init_seed;
  j["tied_head"] = tied_head;
  return j.dump();
}

ModelConfig ModelConfig::from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.init_seed = j.at("init_seed").get<uint64_t>();
  c.tied_head = j.value("tied_head", false);
  c.validate();
  return c;
}

uint64_t ModelConfig::hash() const { return fnv1a64(to_json()); }

std::vector<LayoutEntry> model_layout(const ModelConfig& config) {
  config.validate();
  const int64_t v = config.vocab_size, d = config.d_model, f = config.d_ff;
  std::vector<LayoutEntry> layout;
  layout.push_back({"tok_emb", {v, d}});
  layout.push_back({"pos_emb", {config.max_seq_len, d}});
  for (int i = 0; i < config.n_layers; ++i) {
    const std::string p = "layer" + std::to_string(i) + ".";
    layout.push_back({p + "ln1.gain", {d}});
    layout.push_back({p + "ln1.bias", {d}});
    layout.push_back({p + "attn.wq", {d, d}});
    layout.push_back({p + "attn.bq", {d}});
    layout.push_back({p + "attn.wk", {d, d}});
    layout.push_back({p + "attn.bk", {d}});
    layout.push_back({p + "attn.wv", {d, d}});
    layout.push_back({p + "attn.bv", {d}});
    layout.push_back({p + "attn.wo", {d, d}});
    layout.push_back({p + "attn.bo", {d}});
    layout.push_back({p + "ln2.gain", {d}});
    layout.push_back({p + "ln2.bias", {d}});
    layout.push_back({p + "mlp.w1", {d, f}});
    layout.push_back({p + "mlp.b1", {f}});
    layout.push_back({p + "mlp.w2", {f, d}});
    layout.push_back({p + "mlp.b2", {d}});
  }
  layout.push_back({"ln_f.gain", {d}});
  layout.push_back({"ln_f.bias", {d}});
  if (!config.tied_head) layout.push_back({"head.w", {d, v}});
  return layout;
}

size_t param_count(const ModelConfig& config) {
  size_t n = 0;
  for (const auto& e : model_layout(config)) n += e.numel();
  return n;
}

namespace {
bool is_gain_entry(const std::string& name) { return name.ends_with(".gain"); }
bool is_bias_entry(const std::string& name) {
  for (const char* suffix : {".bias", ".bq", ".bk", ".bv", ".bo", ".b1", ".b2"})
    if (name.ends_with(suffix)) return true;
  return false;
}
}  // namespace

TransformerModel init_model(const ModelConfig& config) {
  ParamVector params(model_layout(config));
  Rng rng(config.init_seed);
  for (const auto& e : params.layout()) {
    auto s = params.slice(e.name);
    if (is_gain_entry(e.name)) {
      std::fill(s.begin(), s.end(), 1.0);
    } else if (is_bias_entry(e.name)) {
      std::fill(s.begin(), s.end(), 0.0);
    } else {
      for (double& w : s) w = 0.02 * rng.next_gaussian();
    }
  }
  return TransformerModel{config, std::move(params)};
}

std::atomic<uint64_t>& model_compute_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

Tensor forward_logits(const TransformerModel& model, std::span<const int> tokens) {
  const ModelConfig& cfg = model.config;
  const auto T = static_cast<int64_t>(tokens.size());
  if (T < 1) throw std::invalid_argument("forward_logits: empty token sequence");
  if (T > cfg.max_seq_len) throw std::invalid_argument("forward_logits: sequence too long");
  for (int tok : tokens)
    if (tok < 0 || tok >= cfg.vocab_size)
      throw std::invalid_argument("forward_logits: token id out of range");
  model_compute_counter().fetch_add(1, std::memory_order_relaxed);

  const ParamVector& pv = model.params;
  const int64_t d = cfg.d_model;
  const int n_heads = cfg.n_heads;
  const int64_t hd = d / n_heads;
  const double inv_scale = 1.0 / std::sqrt(static_cast<double>(hd));

  auto tok_emb = param_mat(pv, "tok_emb");
  auto pos_emb = param_mat(pv, "pos_emb");
  Mat x(T, d);
  for (int64_t t = 0; t < T; ++t)
    x.row(t) = tok_emb.row(tokens[static_cast<size_t>(t)]) + pos_emb.row(t);

  Mat h, q, k, vv, scores, ctx;
  for (int layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = "layer" + std::to_string(layer) + ".";
    h = x;
    layer_norm_rows(h, pv.slice(p + "ln1.gain"), pv.slice(p + "ln1.bias"));
    q.noalias() = h * param_mat(pv, p + "attn.wq");
    k.noalias() = h * param_mat(pv, p + "attn.wk");
    vv.noalias() = h * param_mat(pv, p + "attn.wv");
    q.rowwise() += param_mat(pv, p + "attn.bq").reshaped().transpose();
    k.rowwise() += param_mat(pv, p + "attn.bk").reshaped().transpose();
    vv.rowwise() += param_mat(pv, p + "attn.bv").reshaped().transpose();
    ctx.resize(T, d);
    for (int head = 0; head < n_heads; ++head) {
      auto qh = q.block(0, head * hd, T, hd);
      auto kh = k.block(0, head * hd, T, hd);
      auto vh = vv.block(0, head * hd, T, hd);
      scores.noalias() = qh * kh.transpose() * inv_scale;
      for (int64_t i = 0; i < T; ++i) {
        double mx = scores(i, 0);
        for (int64_t j = 1; j <= i; ++j) mx = std::max(mx, scores(i, j));
        double sum = 0.0;
        for (int64_t j = 0; j <= i; ++j) {
          scores(i, j) = std::exp(scores(i, j) - mx);
          sum += scores(i, j);
        }
        const double inv = 1.0 / sum;
        for (int64_t j = 0; j <= i; ++j) scores(i, j) *= inv;
        for (int64_t j = i + 1; j < T; ++j) scores(i, j) = 0.0;
      }
      ctx.block(0, head * hd, T, hd).noalias() = scores * vh;
    }
    x.noalias() += ctx * param_mat(pv, p + "attn.wo");
    x.rowwise() += param_mat(pv, p + "attn.bo").reshaped().transpose();

    h = x;
    layer_norm_rows(h, pv.slice(p + "ln2.gain"), pv.slice(p + "ln2.bias"));
    Mat ff1 = h * param_mat(pv, p + "mlp.w1");
    ff1.rowwise() += param_mat(pv, p + "mlp.b1").reshaped().transpose();
    for (int64_t i = 0; i < ff1.rows(); ++i)
      for (int64_t j = 0; j < ff1.cols(); ++j)
        ff1(i, j) = 0.5 * ff1(i, j) * (1.0 + std::erf(ff1(i, j) * (1.0 / std::numbers::sqrt2)));
    x.noalias() += ff1 * param_mat(pv, p + "mlp.w2");
    x.rowwise() += param_mat(pv, p + "mlp.b2").reshaped().transpose();
  }

  layer_norm_rows(x, pv.slice("ln_f.gain"), pv.slice("ln_f.bias"));
  Tensor out({T, cfg.vocab_size});
  if (cfg.tied_head) {
    MatMap(out.data.data(), T, cfg.vocab_size).noalias() = x * param_mat(pv, "tok_emb").transpose();
  } else {
    MatMap(out.data.data(), T, cfg.vocab_size).noalias() = x * param_mat(pv, "head.w");
  }
  return out;
}

std::vector<double> forward_last_logits(const TransformerModel& model,
                                        std::span<const int> tokens) {
  Tensor logits = forward_logits(model, tokens);
  const auto v = static_cast<size_t>(logits.cols());
  std::vector<double> out(v);
  const size_t off = (logits.numel() - v);
  std::copy_n(logits.data.begin() + static_cast<long>(off), v, out.begin());
  return out;
}

namespace {

// positions with loss_mask[t] set, t >= 1, are prediction targets
int count_targets(const MaskedSequence& seq) {
  if (seq.tokens.size() != seq.loss_mask.size())
    throw std::invalid_argument("MaskedSequence: tokens/loss_mask length mismatch");
  int count = 0;
  for (size_t t = 1; t < seq.tokens.size(); ++t)
    if (seq.loss_mask[t]) ++count;
  return count;
}

}  // namespace

double sequence_nll(const TransformerModel& model, const MaskedSequence& seq) {
  const int n_targets = count_targets(seq);
  if (n_targets == 0) throw std::invalid_argument("sequence_nll: no masked-in targets");
  Tensor logits = forward_logits(model, seq.tokens);
  const auto v = static_cast<size_t>(logits.cols());
  double total = 0.0;
  std::vector<double> row(v);
  for (size_t t = 1; t < seq.tokens.size(); ++t) {
    if (!seq.loss_mask[t]) continue;
    std::copy_n(logits.data.begin() + static_cast<long>((t - 1) * v), v, row.begin());
    log_softmax_inplace(row.data(), v);
    total -= row[static_cast<size_t>(seq.tokens[t])];
  }
  return total / n_targets;
}

PackedBatch pack_sequences(std::span<const MaskedSequence> seqs,
                           std::span<const double> seq_weights) {
  if (seqs.size() != seq_weights.size())
    throw std::invalid_argument("pack_sequences: weights length mismatch");
  PackedBatch batch;
  size_t total = 0;
  for (const auto& s : seqs) total += s.tokens.size();
  batch.tokens.reserve(total);
  batch.positions.reserve(total);
  batch.targets.reserve(total);
  batch.weights.reserve(total);
  for (size_t s = 0; s < seqs.size(); ++s) {
    const auto& seq = seqs[s];
    const int n_targets = count_targets(seq);
    if (n_targets == 0) throw std::invalid_argument("pack_sequences: no masked-in targets");
    const double w = seq_weights[s] / n_targets;
    batch.spans.push_back({static_cast<int64_t>(batch.tokens.size()),
                           static_cast<int64_t>(seq.tokens.size())});
    for (size_t t = 0; t < seq.tokens.size(); ++t) {
      batch.tokens.push_back(seq.tokens[t]);
      batch.positions.push_back(static_cast<int>(t));
      const bool has_target = t + 1 < seq.tokens.size() && seq.loss_mask[t + 1];
      batch.targets.push_back(has_target ? seq.tokens[t + 1] : -1);
      batch.weights.push_back(has_target ? w : 0.0);
    }
  }
  return batch;
}

Tape::Id transformer_logits_graph(Tape& tape, const ModelConfig& config,
                                  const ParamLeafMap& params, const PackedBatch& batch) {
  config.validate();
  for (int tok : batch.tokens)
    if (tok < 0 || tok >= config.vocab_size)
      throw std::invalid_argument("transformer_logits_graph: token id out of range");
  for (int pos : batch.positions)
    if (pos < 0 || pos >= config.max_seq_len)
      throw std::invalid_argument("transformer_logits_graph: sequence too long");
  model_compute_counter().fetch_add(1, std::memory_order_relaxed);

  const auto id = [&](const std::string& name) { return params.at(name); };
  Tape::Id x = tape.add(tape.embedding(id("tok_emb"), batch.tokens),
                        tape.embedding(id("pos_emb"), batch.positions));
  for (int layer = 0; layer < config.n_layers; ++layer) {
    const std::string p = "layer" + std::to_string(layer) + ".";
    Tape::Id h = tape.layer_norm(x, id(p + "ln1.gain"), id(p + "ln1.bias"));
    Tape::Id q = tape.add_row_broadcast(tape.matmul(h, id(p + "attn.wq")), id(p + "attn.bq"));
    Tape::Id k = tape.add_row_broadcast(tape.matmul(h, id(p + "attn.wk")), id(p + "attn.bk"));
    Tape::Id v = tape.add_row_broadcast(tape.matmul(h, id(p + "attn.wv")), id(p + "attn.bv"));
    Tape::Id ctx = tape.causal_attention(q, k, v, batch.spans, config.n_heads);
    Tape::Id attn_out =
        tape.add_row_broadcast(tape.matmul(ctx, id(p + "attn.wo")), id(p + "attn.bo"));
    x = tape.add(x, attn_out);
    Tape::Id h2 = tape.layer_norm(x, id(p + "ln2.gain"), id(p + "ln2.bias"));
    Tape::Id ff1 =
        tape.gelu(tape.add_row_broadcast(tape.matmul(h2, id(p + "mlp.w1")), id(p + "mlp.b1")));
    Tape::Id ff2 = tape.add_row_broadcast(tape.matmul(ff1, id(p + "mlp.w2")), id(p + "mlp.b2"));
    x = tape.add(x, ff2);
  }
  x = tape.layer_norm(x, id("ln_f.gain"), id("ln_f.bias"));
  return config.tied_head ? tape.matmul_nt(x, id("tok_emb")) : tape.matmul(x, id("head.w"));
}

Tape::Id transformer_loss_graph(Tape& tape, const ModelConfig& config,
                                const ParamLeafMap& params, const PackedBatch& batch) {
  Tape::Id logits = transformer_logits_graph(tape, config, params, batch);
  return tape.weighted_cross_entropy(logits, batch.targets, batch.weights);
}

std::pair<double, ParamVector> accumulate_loss_grad(const TransformerModel& model,
                                                    std::span<const MaskedSequence> dataset) {
  if (dataset.empty()) throw std::invalid_argument("accumulate_loss_grad: empty dataset");
  // fixed chunking keeps the reduction order independent of worker count
  constexpr size_t kChunk = 32;
  const size_t n = dataset.size();
  const size_t n_chunks = (n + kChunk - 1) / kChunk;
  std::vector<double> losses(n_chunks, 0.0);
  std::vector<ParamVector> grads(n_chunks);
  parallel_for(n_chunks, [&](size_t c) {
    const size_t begin = c * kChunk;
    const size_t len = std::min(kChunk, n - begin);
    std::vector<double> weights(len, 1.0 / static_cast<double>(n));
    PackedBatch batch = pack_sequences(dataset.subspan(begin, len), weights);
    auto [value, grad] = value_and_grad(
        [&](Tape& tape, const ParamLeafMap& leaves) {
          return transformer_loss_graph(tape, model.config, leaves, batch);
        },
        model.params);
    losses[c] = value;
    grads[c] = std::move(grad);
  });
  double loss = 0.0;
  ParamVector grad = ParamVector::zeros_like(model.params);
  for (size_t c = 0; c < n_chunks; ++c) {
    loss += losses[c];
    grad.axpy(1.0, grads[c]);
  }
  return {loss, grad};
}

void save_checkpoint(const TransformerModel& model, const std::filesystem::path& dir,
                     const std::string& name) {
  std::filesystem::create_directories(dir);
  std::ofstream os(dir / (name + ".config.json"));
  if (!os) throw std::runtime_error("save_checkpoint: cannot write config for " + name);
  os << model.config.to_json() << "\n";
  os.close();
  model.params.save(dir / (name + ".params.bin"));
}

TransformerModel load_checkpoint(const std::filesystem::path& dir, const std::string& name) {
  std::ifstream is(dir / (name + ".config.json"));
  if (!is) throw std::runtime_error("load_checkpoint: missing config for " + name);
  std::string text((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
  TransformerModel model;
  model.config = ModelConfig::from_json(text);
  model.params = ParamVector::load(dir / (name + ".params.bin"));
  const ParamVector expected(model_layout(model.config));
  if (model.params.layout() != expected.layout())
    throw std::runtime_error("load_checkpoint: params layout does not match config for " + name);
  return model;
}

}  // namespace ads
