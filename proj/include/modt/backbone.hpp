#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "modt/diffcore/ops.hpp"
#include "modt/diffcore/parameters.hpp"
#include "modt/window.hpp"

namespace modt::backbone {

struct ModelConfig {
  int num_layers = 4;
  int num_heads = 4;
  int embed_dim = 256;
  int context_len = 20;  // K, in steps
  double dropout = 0.1;
  Variant variant = Variant::modt;
  int state_dim = 4;
  int action_dim = 2;
  int region_bins = 3;
  bool use_timestep_embedding = false;
  int max_timestep = 1024;
  /// false gives deterministic heads: log-std pinned at 0, so the NLL is a shifted half squared error.
  bool gaussian_heads = true;
  double init_std = 0.02;

  void validate() const;
  std::size_t region_code_length() const { return static_cast<std::size_t>(region_bins * action_dim); }
  std::size_t max_tokens() const { return static_cast<std::size_t>(context_len) * tokens_per_step(variant); }
};

nlohmann::json to_json(const ModelConfig& c);
/// Keys missing from `j` keep the values in `base`; unknown keys are rejected.
ModelConfig model_config_from_json(const nlohmann::json& j, ModelConfig base = {});
std::string config_digest(const ModelConfig& c);

enum class Mode { train, eval };

struct AttentionRecord {
  std::size_t window = 0;
  std::size_t block = 0;
  std::size_t head = 0;
  std::size_t length = 0;        // T
  std::vector<double> weights;  // T x T row-major

  double at(std::size_t i, std::size_t j) const { return weights[i * length + j]; }
};

template <class T>
struct ForwardOutput {
  diff::Tensor<T>* hidden = nullptr;  // [total tokens x embed_dim]
  diff::Tensor<T>* tokens = nullptr;  // token embeddings entering the first norm
  std::vector<std::size_t> offsets;   // first hidden row of each window
  std::vector<AttentionRecord> attention;
};

template <class T>
void init_parameters(const ModelConfig& config, diff::ParameterStore<T>& store, std::mt19937_64& rng);

/// One learned projection per token type, scattered into interleaved token
/// order; windows are stacked along rows. No positional embedding is added
/// (an optional timestep embedding is, when configured).
template <class T>
diff::Tensor<T>& embed_tokens(diff::Tape<T>& tape, const ModelConfig& config, diff::ParameterStore<T>& store,
                              std::span<const ContextWindow> windows);

/// Pre-norm causal transformer over each window independently. Dropout is
/// active only in `Mode::train`, with masks derived from `dropout_seed`.
template <class T>
ForwardOutput<T> forward(diff::Tape<T>& tape, const ModelConfig& config, diff::ParameterStore<T>& store,
                         std::span<const ContextWindow> windows, Mode mode, std::uint64_t dropout_seed = 0,
                         bool capture_attention = false);

/// {config, token_roles, blocks}; blocks[b][h] is a T x T matrix. Records
/// must all describe the same window length.
nlohmann::json export_attention(std::span<const AttentionRecord> records, const ModelConfig& config,
                                const std::vector<std::string>& token_roles);

}  // namespace modt::backbone
