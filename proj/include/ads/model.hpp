#pragma once

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "ads/param_vector.hpp"
#include "ads/tape.hpp"
#include "ads/value_and_grad.hpp"

namespace ads {

struct ModelConfig {
  int vocab_size = 18;
  int d_model = 64;
  int n_layers = 2;
  int n_heads = 2;
  int d_ff = 256;
  int max_seq_len = 96;
  uint64_t init_seed = 0;
  bool tied_head = false;  // untied output head by default

  void validate() const;
  std::string to_json() const;
  static ModelConfig from_json(const std::string& text);
  // stable digest over all architecture fields + seed
  uint64_t hash() const;
};

// Decoder-only pre-norm transformer with learned positional embeddings.
struct TransformerModel {
  ModelConfig config;
  ParamVector params;
};

struct MaskedSequence {
  std::vector<int> tokens;
  std::vector<uint8_t> loss_mask;  // true = position contributes as a target
};

std::vector<LayoutEntry> model_layout(const ModelConfig& config);
size_t param_count(const ModelConfig& config);

// Gaussian(0, 0.02^2) weights from init_seed; norm gains 1, biases 0.
TransformerModel init_model(const ModelConfig& config);

// Counts model forward/backward computations process-wide; the pipeline's
// warm-cache test asserts it stays flat on cache hits.
std::atomic<uint64_t>& model_compute_counter();

// Full [T, V] logits; row t predicts position t+1. Plain (tape-free) path.
Tensor forward_logits(const TransformerModel& model, std::span<const int> tokens);

// Last-row logits only, for autoregressive sampling.
std::vector<double> forward_last_logits(const TransformerModel& model,
                                        std::span<const int> tokens);

// Mean of -log p(tokens[t+1] | tokens[0..t]) over positions with
// loss_mask[t+1] set.
double sequence_nll(const TransformerModel& model, const MaskedSequence& seq);

// Gradient of the dataset-mean NLL, accumulated in fixed-size chunks so the
// result is bitwise independent of worker count.
std::pair<double, ParamVector> accumulate_loss_grad(const TransformerModel& model,
                                                    std::span<const MaskedSequence> dataset);

// --- tape path (training and oracles) ----------------------------------

struct PackedBatch {
  std::vector<int> tokens;       // all sequences concatenated
  std::vector<int> positions;    // position of each token within its sequence
  std::vector<SeqSpan> spans;    // one span per sequence
  std::vector<int> targets;      // next-token target per row (-1 = none)
  std::vector<double> weights;   // per-row loss weight
};

// seq_weight(s) scales sequence s's per-target weight 1/count_s; pass
// 1/n_sequences to get the dataset-mean NLL.
PackedBatch pack_sequences(std::span<const MaskedSequence> seqs,
                           std::span<const double> seq_weights);

// Builds the forward graph over packed rows and returns the [N, V] logits id.
Tape::Id transformer_logits_graph(Tape& tape, const ModelConfig& config,
                                  const ParamLeafMap& params, const PackedBatch& batch);

// Scalar weighted-NLL loss node over a packed batch.
Tape::Id transformer_loss_graph(Tape& tape, const ModelConfig& config,
                                const ParamLeafMap& params, const PackedBatch& batch);

// --- checkpoints --------------------------------------------------------

// Two files: <name>.config.json and <name>.params.bin under dir.
void save_checkpoint(const TransformerModel& model, const std::filesystem::path& dir,
                     const std::string& name);
TransformerModel load_checkpoint(const std::filesystem::path& dir, const std::string& name);

}  // namespace ads
