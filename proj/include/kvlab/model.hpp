#pragma once

// Toy autoregressive decoder (pre-RMSNorm attention blocks, optional MLP,
// tied unembedding) and the paged KV-cache it reads and writes.

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "kvlab/linalg.hpp"

namespace kvlab {

using Token = std::int32_t;

struct ModelConfig {
  int layers = 4;
  int hidden = 128;
  int heads = 2;
  int kv_heads = 2;
  int head_dim = 64;
  int vocab = 1024;
  double rope_base = 10000.0;
  int block_size = 16;
  double norm_eps = 1e-6;
  bool mlp = false;
  int mlp_hidden = 256;

  int kv_dim() const { return kv_heads * head_dim; }
  int group_size() const { return heads / kv_heads; }
  bool is_mha() const { return heads == kv_heads; }
  int mid_layer() const { return layers / 2; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

struct LayerWeights {
  Eigen::MatrixXd wq;  // hidden x hidden
  Eigen::MatrixXd wk;  // kv_dim x hidden
  Eigen::MatrixXd wv;  // kv_dim x hidden
  Eigen::MatrixXd wo;  // hidden x hidden
  Eigen::VectorXd attn_norm;
  // Present only when config.mlp is set.
  Eigen::MatrixXd w_up;    // mlp_hidden x hidden
  Eigen::MatrixXd w_down;  // hidden x mlp_hidden
  Eigen::VectorXd mlp_norm;
};

struct Weights {
  ModelConfig config;
  Eigen::MatrixXd embedding;  // vocab x hidden; also the unembedding
  std::vector<LayerWeights> layers;
  Eigen::VectorXd final_norm;

  void validate() const;
};

// Gaussian init with std 1/sqrt(hidden); norm gains are 1 + 0.1 N(0,1).
Weights init_weights(const ModelConfig& config, std::uint64_t seed);

// Emulates a fine-tuned deployment of a public base model: every tensor gets
// additive Gaussian noise of relative (RMS) magnitude rho.
Weights perturb_weights(const Weights& base, double rho, std::uint64_t seed);

// Hand-built two-layer copy model. Layer 0 heads attend to the previous
// position and copy its token vector into a separate subspace; layer 1 is an
// induction head that attends to the position whose predecessor equals the
// current token and emits that position's token. Feeding [bos, s...] and then
// `bos` makes greedy decoding reproduce s, provided s has no repeated tokens.
struct EchoModel {
  Weights weights;
  Token bos = 0;
};
ModelConfig echo_config();
EchoModel make_echo_model(const ModelConfig& config, std::uint64_t seed);

enum class BlockState { kPlaintext, kCloaked, kDpNoised };
const char* to_string(BlockState state);
BlockState block_state_from_string(const std::string& name);

// One (layer, kv-head) page of b slots. Rows may be stored in any order;
// slots[r] names the logical slot held by row r. Rows whose slot is >= fill
// are padding and never take part in attention.
template <typename Scalar>
struct KVBlock {
  int layer = 0;
  int head = 0;
  Matrix<Scalar> k;
  Matrix<Scalar> v;
  int fill = 0;
  BlockState state = BlockState::kPlaintext;
  std::vector<int> slots;

  KVBlock() = default;
  KVBlock(int layer_, int head_, int block_size, int head_dim);

  int block_size() const { return static_cast<int>(k.rows()); }
  bool row_valid(int row) const { return slots[static_cast<std::size_t>(row)] < fill; }
  int row_of_slot(int slot) const;
  bool slots_identity() const;
};

struct SlotLocation {
  int block_id = 0;
  int slot = 0;
};

template <typename Scalar>
class PagedKVCache {
 public:
  PagedKVCache() = default;
  PagedKVCache(int layers, int kv_heads, int head_dim, int block_size);
  explicit PagedKVCache(const ModelConfig& config)
      : PagedKVCache(config.layers, config.kv_heads, config.head_dim, config.block_size) {}

  int layers() const { return layers_; }
  int kv_heads() const { return kv_heads_; }
  int head_dim() const { return head_dim_; }
  int block_size() const { return block_size_; }
  int seq_len() const { return seq_len_; }

  // Claims the next logical position, allocating a fresh page for every
  // (layer, head) when the position starts a new block.
  int reserve_position();
  // Stores one token's key/value rows; narrows to Scalar here and only here.
  void write(int layer, int head, int pos, const Eigen::RowVectorXd& k, const Eigen::RowVectorXd& v);

  SlotLocation locate(int layer, int head, int pos) const;
  const std::vector<int>& block_table(int layer, int head) const;

  std::vector<KVBlock<Scalar>>& blocks() { return blocks_; }
  const std::vector<KVBlock<Scalar>>& blocks() const { return blocks_; }
  KVBlock<Scalar>& block(int id) { return blocks_.at(static_cast<std::size_t>(id)); }
  const KVBlock<Scalar>& block(int id) const { return blocks_.at(static_cast<std::size_t>(id)); }

  // Copies of the pages of one layer ordered by (head, logical block).
  std::vector<KVBlock<Scalar>> extract_layer(int layer) const;

  // Valid rows of (layer, head) widened to double, in stored row order.
  void gather(int layer, int head, Eigen::MatrixXd& k, Eigen::MatrixXd& v) const;

  // The raw row at the position's slot, ignoring any row permutation. This is
  // what an eavesdropper without key material reads.
  Eigen::RowVectorXd raw_key_row(int layer, int head, int pos) const;
  Eigen::RowVectorXd raw_value_row(int layer, int head, int pos) const;
  // The row holding the position's slot, honouring the block's slot labels.
  Eigen::RowVectorXd key_row(int layer, int head, int pos) const;
  Eigen::RowVectorXd value_row(int layer, int head, int pos) const;

  bool has_state(BlockState state) const;
  void validate() const;

  // Overwrites the table; used when loading from a file.
  void set_layout(int seq_len, std::vector<std::vector<int>> tables, std::vector<KVBlock<Scalar>> blocks);
  const std::vector<std::vector<int>>& tables() const { return tables_; }

 private:
  std::size_t table_index(int layer, int head) const;

  int layers_ = 0;
  int kv_heads_ = 0;
  int head_dim_ = 0;
  int block_size_ = 0;
  int seq_len_ = 0;
  std::vector<KVBlock<Scalar>> blocks_;
  std::vector<std::vector<int>> tables_;  // [layer * kv_heads + head] -> logical block -> block id
};

using KVCache = PagedKVCache<float>;

struct AttentionResult {
  Eigen::RowVectorXd output;                 // after W_o
  Eigen::MatrixXd new_k;                     // kv_heads x head_dim, RoPE applied
  Eigen::MatrixXd new_v;                     // kv_heads x head_dim
  std::vector<Eigen::RowVectorXd> weights;   // per query head, cached rows then self
};

// Keys/values of one layer already widened to double, per kv-head.
struct GatheredLayer {
  std::vector<Eigen::MatrixXd> k;
  std::vector<Eigen::MatrixXd> v;
};

template <typename Scalar>
GatheredLayer gather_layer(const PagedKVCache<Scalar>& cache, int layer);

// Attention for the token at `pos` given its normalized layer input.
// The gathered layer must hold exactly `pos` rows per head.
AttentionResult attention_step(const ModelConfig& config, const LayerWeights& layer,
                               const Eigen::RowVectorXd& x, int pos, const GatheredLayer& cached);

template <typename Scalar>
AttentionResult attention_step(const ModelConfig& config, const LayerWeights& layer,
                               const Eigen::RowVectorXd& x, int pos,
                               std::span<const KVBlock<Scalar>> blocks);

// Per-candidate key/value rows (all kv-heads concatenated) produced at one
// layer when each candidate is appended after the cached prefix.
struct CandidateKV {
  Eigen::MatrixXd k;  // candidates x kv_dim
  Eigen::MatrixXd v;
};

class Model {
 public:
  explicit Model(Weights weights);

  const ModelConfig& config() const { return weights_.config; }
  const Weights& weights() const { return weights_; }

  Eigen::RowVectorXd rms_norm(const Eigen::RowVectorXd& x, const Eigen::VectorXd& gain) const;

  template <typename Scalar>
  Eigen::RowVectorXd decode_step(PagedKVCache<Scalar>& cache, Token token) const;

  // Logits for every position (rows), filling the cache.
  template <typename Scalar>
  Eigen::MatrixXd prefill(std::span<const Token> tokens, PagedKVCache<Scalar>& cache) const;

  // Greedy continuation: feeds `last_logits`' argmax back in `steps` times.
  template <typename Scalar>
  std::vector<Token> greedy_continue(PagedKVCache<Scalar>& cache, const Eigen::RowVectorXd& last_logits,
                                     int steps) const;

  // Cache-free full recomputation in double precision; the test oracle.
  Eigen::MatrixXd forward_full(std::span<const Token> tokens) const;

  // Batched one-token extension of `prefix` for every candidate, run up to
  // `layer`. `prefix_layers[l]` is gather_layer(prefix cache, l).
  CandidateKV candidate_kv(const std::vector<GatheredLayer>& prefix_layers, int pos,
                           std::span<const Token> candidates, int layer) const;

 private:
  void check_token(Token token) const;

  Weights weights_;
};

int argmax(const Eigen::RowVectorXd& logits);

// Loss-free file roundtrip (container format, see docs/file-format.md).
void save_weights(const Weights& weights, const std::filesystem::path& path);
Weights load_weights(const std::filesystem::path& path);
template <typename Scalar>
void save_cache(const PagedKVCache<Scalar>& cache, const std::filesystem::path& path);
KVCache load_cache(const std::filesystem::path& path);

}  // namespace kvlab
