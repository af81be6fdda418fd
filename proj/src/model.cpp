#include "kvlab/model.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "kvlab/container.hpp"
#include "kvlab/json_io.hpp"

namespace kvlab {

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"layers", c.layers},       {"hidden", c.hidden},         {"heads", c.heads},
                     {"kv_heads", c.kv_heads},   {"head_dim", c.head_dim},     {"vocab", c.vocab},
                     {"rope_base", c.rope_base}, {"block_size", c.block_size}, {"norm_eps", c.norm_eps},
                     {"mlp", c.mlp},             {"mlp_hidden", c.mlp_hidden}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  const ModelConfig d;
  c.layers = j.value("layers", d.layers);
  c.hidden = j.value("hidden", d.hidden);
  c.heads = j.value("heads", d.heads);
  c.kv_heads = j.value("kv_heads", d.kv_heads);
  c.head_dim = j.value("head_dim", d.head_dim);
  c.vocab = j.value("vocab", d.vocab);
  c.rope_base = j.value("rope_base", d.rope_base);
  c.block_size = j.value("block_size", d.block_size);
  c.norm_eps = j.value("norm_eps", d.norm_eps);
  c.mlp = j.value("mlp", d.mlp);
  c.mlp_hidden = j.value("mlp_hidden", d.mlp_hidden);
}

void ModelConfig::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kInvalidConfig, what); };
  if (layers < 1) fail("layers must be >= 1");
  if (heads < 1 || kv_heads < 1) fail("head counts must be >= 1");
  if (heads % kv_heads != 0) fail("heads must be a multiple of kv_heads");
  if (head_dim < 2 || head_dim % 2 != 0) fail("head_dim must be even");
  if (hidden != heads * head_dim) fail("hidden must equal heads * head_dim");
  if (vocab < 2) fail("vocab must be >= 2");
  if (!(rope_base > 1.0)) fail("rope_base must be > 1");
  if (block_size < 1) fail("block_size must be >= 1");
  if (!(norm_eps >= 0.0)) fail("norm_eps must be >= 0");
  if (mlp && mlp_hidden < 1) fail("mlp_hidden must be >= 1");
}

void Weights::validate() const {
  config.validate();
  auto check = [](bool ok, const std::string& what) {
    if (!ok) throw Error(ErrorCode::kInvalidConfig, "weights: " + what);
  };
  const Index D = config.hidden, kv = config.kv_dim();
  check(embedding.rows() == config.vocab && embedding.cols() == D, "embedding shape");
  check(embedding.allFinite(), "embedding not finite");
  check(final_norm.size() == D, "final_norm shape");
  check(layers.size() == static_cast<std::size_t>(config.layers), "layer count");
  for (const auto& l : layers) {
    check(l.wq.rows() == D && l.wq.cols() == D, "wq shape");
    check(l.wk.rows() == kv && l.wk.cols() == D, "wk shape");
    check(l.wv.rows() == kv && l.wv.cols() == D, "wv shape");
    check(l.wo.rows() == D && l.wo.cols() == D, "wo shape");
    check(l.attn_norm.size() == D, "attn_norm shape");
    check(l.wq.allFinite() && l.wk.allFinite() && l.wv.allFinite() && l.wo.allFinite(), "non-finite projection");
    if (config.mlp) {
      check(l.w_up.rows() == config.mlp_hidden && l.w_up.cols() == D, "w_up shape");
      check(l.w_down.rows() == D && l.w_down.cols() == config.mlp_hidden, "w_down shape");
      check(l.mlp_norm.size() == D, "mlp_norm shape");
    }
  }
}

namespace {

Eigen::MatrixXd gaussian(Index rows, Index cols, double stddev, std::uint64_t seed) {
  Rng rng(seed);
  return standard_normal<double>(rows, cols, rng) * stddev;
}

Eigen::VectorXd gain(Index n, std::uint64_t seed) {
  Rng rng(seed);
  return Eigen::VectorXd::Ones(n) + 0.1 * standard_normal<double>(n, 1, rng);
}

// Tensor tags for seed derivation.
enum Tag : std::uint64_t { kEmbed = 1, kFinal, kWq, kWk, kWv, kWo, kAttnNorm, kUp, kDown, kMlpNorm };

template <typename Fn>
void for_each_tensor(Weights& w, Fn&& fn) {
  fn(w.embedding, std::uint64_t{kEmbed}, -1);
  fn(w.final_norm, std::uint64_t{kFinal}, -1);
  for (int l = 0; l < static_cast<int>(w.layers.size()); ++l) {
    auto& lw = w.layers[static_cast<std::size_t>(l)];
    fn(lw.wq, std::uint64_t{kWq}, l);
    fn(lw.wk, std::uint64_t{kWk}, l);
    fn(lw.wv, std::uint64_t{kWv}, l);
    fn(lw.wo, std::uint64_t{kWo}, l);
    fn(lw.attn_norm, std::uint64_t{kAttnNorm}, l);
    if (w.config.mlp) {
      fn(lw.w_up, std::uint64_t{kUp}, l);
      fn(lw.w_down, std::uint64_t{kDown}, l);
      fn(lw.mlp_norm, std::uint64_t{kMlpNorm}, l);
    }
  }
}

template <typename Derived>
void softmax_inplace(Eigen::MatrixBase<Derived>&& row) {
  const double m = row.maxCoeff();
  row = (row.array() - m).exp().matrix();
  row /= row.sum();
}

template <typename Derived>
void softmax_inplace(Eigen::MatrixBase<Derived>& row) {
  softmax_inplace(std::move(row));
}

double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace

Weights init_weights(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const Index D = config.hidden, kv = config.kv_dim(), F = config.mlp_hidden;
  const double s = 1.0 / std::sqrt(static_cast<double>(D));
  Weights w;
  w.config = config;
  w.embedding = gaussian(config.vocab, D, s, derive_seed(seed, {kEmbed}));
  w.final_norm = gain(D, derive_seed(seed, {kFinal}));
  for (int l = 0; l < config.layers; ++l) {
    const auto L = static_cast<std::uint64_t>(l);
    LayerWeights lw;
    lw.wq = gaussian(D, D, s, derive_seed(seed, {kWq, L}));
    lw.wk = gaussian(kv, D, s, derive_seed(seed, {kWk, L}));
    lw.wv = gaussian(kv, D, s, derive_seed(seed, {kWv, L}));
    lw.wo = gaussian(D, D, s, derive_seed(seed, {kWo, L}));
    lw.attn_norm = gain(D, derive_seed(seed, {kAttnNorm, L}));
    if (config.mlp) {
      lw.w_up = gaussian(F, D, s, derive_seed(seed, {kUp, L}));
      lw.w_down = gaussian(D, F, 1.0 / std::sqrt(static_cast<double>(F)), derive_seed(seed, {kDown, L}));
      lw.mlp_norm = gain(D, derive_seed(seed, {kMlpNorm, L}));
    }
    w.layers.push_back(std::move(lw));
  }
  return w;
}

Weights perturb_weights(const Weights& base, double rho, std::uint64_t seed) {
  if (!(rho >= 0.0)) throw Error(ErrorCode::kInvalidConfig, "perturbation magnitude must be >= 0");
  Weights w = base;
  if (rho == 0.0) return w;
  for_each_tensor(w, [&](auto& tensor, std::uint64_t tag, int layer) {
    const double rms = std::sqrt(tensor.squaredNorm() / static_cast<double>(tensor.size()));
    Rng rng(derive_seed(seed, {0xf17eULL, tag, static_cast<std::uint64_t>(layer + 1)}));
    tensor += (rho * rms) * standard_normal<double>(tensor.rows(), tensor.cols(), rng);
  });
  return w;
}

ModelConfig echo_config() {
  ModelConfig c;
  c.layers = 2;
  c.hidden = 128;
  c.heads = 2;
  c.kv_heads = 2;
  c.head_dim = 64;
  c.vocab = 1024;
  c.rope_base = 1e6;
  c.block_size = 16;
  return c;
}

EchoModel make_echo_model(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  const int D = config.hidden, d = config.head_dim, half = d / 2;
  // Residual layout: [bias | token space (marker + content) | previous-token space].
  const int tok = half;  // token space width; matched through the slow RoPE pairs
  const int bias = 0, tok0 = 1, prev0 = 1 + tok;
  if (config.layers != 2 || prev0 + tok > D || config.vocab > 4 * tok * tok)
    throw Error(ErrorCode::kInvalidConfig, "echo model needs 2 layers and hidden >= 1 + head_dim");

  Weights w;
  w.config = config;
  w.embedding = Eigen::MatrixXd::Zero(config.vocab, D);
  w.final_norm = Eigen::VectorXd::Ones(D);
  Rng rng(seed);
  w.embedding(0, bias) = 1.0;
  w.embedding(0, tok0) = 1.0;  // bos marker, orthogonal to all content vectors
  for (int t = 1; t < config.vocab; ++t) {
    Eigen::RowVectorXd c = standard_normal<double>(1, tok - 1, rng);
    c.normalize();
    w.embedding(t, bias) = 1.0;
    w.embedding.block(t, tok0 + 1, 1, tok - 1) = c;
  }

  auto blank = [&] {
    LayerWeights lw;
    lw.wq = Eigen::MatrixXd::Zero(D, D);
    lw.wk = Eigen::MatrixXd::Zero(config.kv_dim(), D);
    lw.wv = Eigen::MatrixXd::Zero(config.kv_dim(), D);
    lw.wo = Eigen::MatrixXd::Zero(D, D);
    lw.attn_norm = Eigen::VectorXd::Ones(D);
    return lw;
  };

  // Layer 0, head 0: fixed query a and key a R_1 from the bias coordinate on the
  // six fastest pairs, so the score peaks at relative distance 1.
  LayerWeights l0 = blank();
  const double alpha = 2.5;
  Eigen::RowVectorXd a = Eigen::RowVectorXd::Zero(d);
  for (int j = 0; j < 6; ++j) a(j) = alpha;
  const Eigen::RowVectorXd b = a * rope_matrix<double>(d, 1, config.rope_base);
  l0.wq.block(0, bias, d, 1) = a.transpose();
  l0.wk.block(0, bias, d, 1) = b.transpose();
  // Value copies the whole token space (marker included) into the previous-token space.
  const double in_scale = std::sqrt(static_cast<double>(D) / 2.0);  // RMSNorm factor of an embedding row
  for (int i = 0; i < tok; ++i) {
    l0.wv(i, tok0 + i) = 1.0;
    l0.wo(prev0 + i, i) = 1.0 / in_scale;
  }

  // Layer 1, head 0: query from token content, key from the previous-token
  // space, both on the slowest pairs; value emits the content (not the marker).
  LayerWeights l1 = blank();
  const double lambda = 3.4, gamma = 12.0;
  auto slow_dim = [&](int i) { return i < half / 2 ? half / 2 + i : half + half / 2 + (i - half / 2); };
  for (int i = 0; i < tok; ++i) {
    l1.wq(slow_dim(i), tok0 + i) = lambda;
    l1.wk(slow_dim(i), prev0 + i) = lambda;
  }
  const double l1_scale = std::sqrt(static_cast<double>(D) / 3.0);
  for (int i = 1; i < tok; ++i) {
    l1.wv(i, tok0 + i) = 1.0;
    l1.wo(tok0 + i, i) = gamma / l1_scale;
  }
  w.layers = {std::move(l0), std::move(l1)};
  w.validate();
  return {std::move(w), 0};
}

const char* to_string(BlockState state) {
  switch (state) {
    case BlockState::kPlaintext: return "plaintext";
    case BlockState::kCloaked: return "cloaked";
    case BlockState::kDpNoised: return "dp-noised";
  }
  return "unknown";
}

BlockState block_state_from_string(const std::string& name) {
  if (name == "plaintext") return BlockState::kPlaintext;
  if (name == "cloaked") return BlockState::kCloaked;
  if (name == "dp-noised") return BlockState::kDpNoised;
  throw Error(ErrorCode::kParse, "unknown block state '" + name + "'");
}

// ---------------------------------------------------------------------------
// KVBlock / PagedKVCache

template <typename Scalar>
KVBlock<Scalar>::KVBlock(int layer_, int head_, int block_size, int head_dim)
    : layer(layer_),
      head(head_),
      k(Matrix<Scalar>::Zero(block_size, head_dim)),
      v(Matrix<Scalar>::Zero(block_size, head_dim)),
      slots(Permutation::identity(block_size).mapping()) {}

template <typename Scalar>
int KVBlock<Scalar>::row_of_slot(int slot) const {
  for (std::size_t r = 0; r < slots.size(); ++r)
    if (slots[r] == slot) return static_cast<int>(r);
  throw Error(ErrorCode::kCacheInconsistency, "slot " + std::to_string(slot) + " not present in block");
}

template <typename Scalar>
bool KVBlock<Scalar>::slots_identity() const {
  for (std::size_t r = 0; r < slots.size(); ++r)
    if (slots[r] != static_cast<int>(r)) return false;
  return true;
}

template <typename Scalar>
PagedKVCache<Scalar>::PagedKVCache(int layers, int kv_heads, int head_dim, int block_size)
    : layers_(layers),
      kv_heads_(kv_heads),
      head_dim_(head_dim),
      block_size_(block_size),
      tables_(static_cast<std::size_t>(layers * kv_heads)) {
  if (layers < 1 || kv_heads < 1 || head_dim < 1 || block_size < 1)
    throw Error(ErrorCode::kInvalidConfig, "cache dimensions must be positive");
}

template <typename Scalar>
std::size_t PagedKVCache<Scalar>::table_index(int layer, int head) const {
  if (layer < 0 || layer >= layers_) throw Error(ErrorCode::kIndexOutOfRange, "layer " + std::to_string(layer));
  if (head < 0 || head >= kv_heads_) throw Error(ErrorCode::kIndexOutOfRange, "kv head " + std::to_string(head));
  return static_cast<std::size_t>(layer * kv_heads_ + head);
}

template <typename Scalar>
int PagedKVCache<Scalar>::reserve_position() {
  if (seq_len_ % block_size_ == 0) {
    for (int l = 0; l < layers_; ++l)
      for (int h = 0; h < kv_heads_; ++h) {
        tables_[table_index(l, h)].push_back(static_cast<int>(blocks_.size()));
        blocks_.emplace_back(l, h, block_size_, head_dim_);
      }
  }
  return seq_len_++;
}

template <typename Scalar>
SlotLocation PagedKVCache<Scalar>::locate(int layer, int head, int pos) const {
  const auto& table = tables_[table_index(layer, head)];
  if (pos < 0 || pos >= seq_len_) throw Error(ErrorCode::kIndexOutOfRange, "position " + std::to_string(pos));
  return {table.at(static_cast<std::size_t>(pos / block_size_)), pos % block_size_};
}

template <typename Scalar>
const std::vector<int>& PagedKVCache<Scalar>::block_table(int layer, int head) const {
  return tables_[table_index(layer, head)];
}

template <typename Scalar>
void PagedKVCache<Scalar>::write(int layer, int head, int pos, const Eigen::RowVectorXd& k,
                                 const Eigen::RowVectorXd& v) {
  if (k.size() != head_dim_ || v.size() != head_dim_)
    throw Error(ErrorCode::kDimensionMismatch, "cache row width differs from head_dim");
  const SlotLocation loc = locate(layer, head, pos);
  auto& blk = block(loc.block_id);
  if (blk.state == BlockState::kCloaked)
    throw Error(ErrorCode::kCacheInconsistency, "cannot append into a cloaked block; de-obfuscate first");
  const int row = blk.row_of_slot(loc.slot);
  blk.k.row(row) = k.cast<Scalar>();
  blk.v.row(row) = v.cast<Scalar>();
  blk.fill = std::max(blk.fill, loc.slot + 1);
}

template <typename Scalar>
std::vector<KVBlock<Scalar>> PagedKVCache<Scalar>::extract_layer(int layer) const {
  if (layer < 0 || layer >= layers_)
    throw Error(ErrorCode::kIndexOutOfRange, "layer " + std::to_string(layer) + " >= " + std::to_string(layers_));
  std::vector<KVBlock<Scalar>> out;
  for (int h = 0; h < kv_heads_; ++h)
    for (int id : block_table(layer, h)) out.push_back(block(id));
  return out;
}

template <typename Scalar>
void PagedKVCache<Scalar>::gather(int layer, int head, Eigen::MatrixXd& k, Eigen::MatrixXd& v) const {
  const auto& table = block_table(layer, head);
  Index n = 0;
  for (int id : table) {
    const auto& blk = block(id);
    for (int r = 0; r < blk.block_size(); ++r) n += blk.row_valid(r) ? 1 : 0;
  }
  k.resize(n, head_dim_);
  v.resize(n, head_dim_);
  Index i = 0;
  for (int id : table) {
    const auto& blk = block(id);
    for (int r = 0; r < blk.block_size(); ++r) {
      if (!blk.row_valid(r)) continue;
      k.row(i) = blk.k.row(r).template cast<double>();
      v.row(i) = blk.v.row(r).template cast<double>();
      ++i;
    }
  }
}

template <typename Scalar>
Eigen::RowVectorXd PagedKVCache<Scalar>::raw_key_row(int layer, int head, int pos) const {
  const auto loc = locate(layer, head, pos);
  return block(loc.block_id).k.row(loc.slot).template cast<double>();
}

template <typename Scalar>
Eigen::RowVectorXd PagedKVCache<Scalar>::raw_value_row(int layer, int head, int pos) const {
  const auto loc = locate(layer, head, pos);
  return block(loc.block_id).v.row(loc.slot).template cast<double>();
}

template <typename Scalar>
Eigen::RowVectorXd PagedKVCache<Scalar>::key_row(int layer, int head, int pos) const {
  const auto loc = locate(layer, head, pos);
  const auto& blk = block(loc.block_id);
  return blk.k.row(blk.row_of_slot(loc.slot)).template cast<double>();
}

template <typename Scalar>
Eigen::RowVectorXd PagedKVCache<Scalar>::value_row(int layer, int head, int pos) const {
  const auto loc = locate(layer, head, pos);
  const auto& blk = block(loc.block_id);
  return blk.v.row(blk.row_of_slot(loc.slot)).template cast<double>();
}

template <typename Scalar>
bool PagedKVCache<Scalar>::has_state(BlockState state) const {
  return std::any_of(blocks_.begin(), blocks_.end(), [&](const auto& b) { return b.state == state; });
}

template <typename Scalar>
void PagedKVCache<Scalar>::validate() const {
  const int expected_blocks = (seq_len_ + block_size_ - 1) / block_size_;
  std::vector<char> used(blocks_.size(), 0);
  for (int l = 0; l < layers_; ++l)
    for (int h = 0; h < kv_heads_; ++h) {
      const auto& table = block_table(l, h);
      if (static_cast<int>(table.size()) != expected_blocks)
        throw Error(ErrorCode::kCacheInconsistency, "block table does not cover seq_len");
      for (std::size_t i = 0; i < table.size(); ++i) {
        const int id = table[i];
        if (id < 0 || static_cast<std::size_t>(id) >= blocks_.size() || used[static_cast<std::size_t>(id)])
          throw Error(ErrorCode::kCacheInconsistency, "block table is not injective");
        used[static_cast<std::size_t>(id)] = 1;
        const auto& blk = blocks_[static_cast<std::size_t>(id)];
        const int want = std::min(block_size_, seq_len_ - static_cast<int>(i) * block_size_);
        if (blk.layer != l || blk.head != h || blk.fill != want)
          throw Error(ErrorCode::kCacheInconsistency, "block " + std::to_string(id) + " metadata mismatch");
        if (blk.k.rows() != block_size_ || blk.k.cols() != head_dim_ || blk.v.rows() != block_size_ ||
            blk.v.cols() != head_dim_)
          throw Error(ErrorCode::kCacheInconsistency, "block " + std::to_string(id) + " has wrong shape");
        Permutation check(blk.slots);  // throws when not a bijection
        (void)check;
      }
    }
}

template <typename Scalar>
void PagedKVCache<Scalar>::set_layout(int seq_len, std::vector<std::vector<int>> tables,
                                      std::vector<KVBlock<Scalar>> blocks) {
  if (tables.size() != static_cast<std::size_t>(layers_ * kv_heads_))
    throw Error(ErrorCode::kCacheInconsistency, "table count mismatch");
  seq_len_ = seq_len;
  tables_ = std::move(tables);
  blocks_ = std::move(blocks);
  validate();
}

template struct KVBlock<float>;
template struct KVBlock<double>;
template class PagedKVCache<float>;
template class PagedKVCache<double>;

// ---------------------------------------------------------------------------
// Attention

template <typename Scalar>
GatheredLayer gather_layer(const PagedKVCache<Scalar>& cache, int layer) {
  GatheredLayer g;
  g.k.resize(static_cast<std::size_t>(cache.kv_heads()));
  g.v.resize(static_cast<std::size_t>(cache.kv_heads()));
  for (int h = 0; h < cache.kv_heads(); ++h)
    cache.gather(layer, h, g.k[static_cast<std::size_t>(h)], g.v[static_cast<std::size_t>(h)]);
  return g;
}

template GatheredLayer gather_layer(const PagedKVCache<float>&, int);
template GatheredLayer gather_layer(const PagedKVCache<double>&, int);

namespace {

// Projects normalized rows, applies RoPE at `pos` to q and k per head.
struct Projected {
  Eigen::MatrixXd q, k, v;
};

Projected project(const ModelConfig& c, const LayerWeights& lw, const Eigen::MatrixXd& xn, int pos) {
  Projected p{xn * lw.wq.transpose(), xn * lw.wk.transpose(), xn * lw.wv.transpose()};
  const int d = c.head_dim;
  for (Index r = 0; r < xn.rows(); ++r) {
    for (int h = 0; h < c.heads; ++h) apply_rope(p.q.row(r).segment(h * d, d), pos, c.rope_base);
    for (int h = 0; h < c.kv_heads; ++h) apply_rope(p.k.row(r).segment(h * d, d), pos, c.rope_base);
  }
  return p;
}

// Attention of m query rows (all at the same position) over n cached rows plus
// each row's own key/value. Returns the per-head context rows before W_o.
Eigen::MatrixXd attend(const ModelConfig& c, const Projected& p, const GatheredLayer& cached,
                       std::vector<Eigen::RowVectorXd>* weights) {
  const int d = c.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  const Index m = p.q.rows();
  Eigen::MatrixXd ctx(m, c.hidden);
  for (int h = 0; h < c.heads; ++h) {
    const int g = h / c.group_size();
    const auto& kc = cached.k[static_cast<std::size_t>(g)];
    const auto& vc = cached.v[static_cast<std::size_t>(g)];
    const Index n = kc.rows();
    const auto qh = p.q.middleCols(h * d, d);
    const auto kself = p.k.middleCols(g * d, d);
    const auto vself = p.v.middleCols(g * d, d);
    Eigen::MatrixXd scores(m, n + 1);
    if (n > 0) scores.leftCols(n) = (qh * kc.transpose()) * scale;
    scores.col(n) = qh.cwiseProduct(kself).rowwise().sum() * scale;
    for (Index r = 0; r < m; ++r) softmax_inplace(scores.row(r));
    auto out = ctx.middleCols(h * d, d);
    out = scores.col(n).asDiagonal() * vself;
    if (n > 0) out += scores.leftCols(n) * vc;
    if (weights) weights->push_back(scores.row(0));
  }
  return ctx;
}

void check_cached(const ModelConfig& c, const GatheredLayer& cached, int pos) {
  if (cached.k.size() != static_cast<std::size_t>(c.kv_heads) || cached.v.size() != cached.k.size())
    throw Error(ErrorCode::kCacheInconsistency, "cached layer has the wrong number of kv heads");
  for (std::size_t g = 0; g < cached.k.size(); ++g)
    if (cached.k[g].rows() != pos || cached.v[g].rows() != pos)
      throw Error(ErrorCode::kCacheInconsistency, "cache holds " + std::to_string(cached.k[g].rows()) +
                                                      " rows but position is " + std::to_string(pos));
}

Eigen::MatrixXd rms_norm_rows(const Eigen::MatrixXd& x, const Eigen::VectorXd& gain, double eps) {
  Eigen::MatrixXd out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const double ms = x.row(r).squaredNorm() / static_cast<double>(x.cols());
    out.row(r) = x.row(r).cwiseProduct(gain.transpose()) / std::sqrt(ms + eps);
  }
  return out;
}

void mlp_residual(const ModelConfig& c, const LayerWeights& lw, Eigen::MatrixXd& x) {
  if (!c.mlp) return;
  Eigen::MatrixXd up = rms_norm_rows(x, lw.mlp_norm, c.norm_eps) * lw.w_up.transpose();
  up = up.unaryExpr([](double v) { return silu(v); });
  x += up * lw.w_down.transpose();
}

}  // namespace

AttentionResult attention_step(const ModelConfig& config, const LayerWeights& layer, const Eigen::RowVectorXd& x,
                               int pos, const GatheredLayer& cached) {
  check_cached(config, cached, pos);
  const Projected p = project(config, layer, Eigen::MatrixXd(x), pos);
  AttentionResult res;
  const Eigen::MatrixXd ctx = attend(config, p, cached, &res.weights);
  res.output = ctx * layer.wo.transpose();
  const int d = config.head_dim;
  res.new_k.resize(config.kv_heads, d);
  res.new_v.resize(config.kv_heads, d);
  for (int g = 0; g < config.kv_heads; ++g) {
    res.new_k.row(g) = p.k.block(0, g * d, 1, d);
    res.new_v.row(g) = p.v.block(0, g * d, 1, d);
  }
  return res;
}

template <typename Scalar>
AttentionResult attention_step(const ModelConfig& config, const LayerWeights& layer, const Eigen::RowVectorXd& x,
                               int pos, std::span<const KVBlock<Scalar>> blocks) {
  GatheredLayer cached;
  cached.k.resize(static_cast<std::size_t>(config.kv_heads));
  cached.v.resize(static_cast<std::size_t>(config.kv_heads));
  for (int g = 0; g < config.kv_heads; ++g) {
    std::vector<Eigen::RowVectorXd> ks, vs;
    for (const auto& blk : blocks) {
      if (blk.head != g) continue;
      for (int r = 0; r < blk.block_size(); ++r) {
        if (!blk.row_valid(r)) continue;
        ks.push_back(blk.k.row(r).template cast<double>());
        vs.push_back(blk.v.row(r).template cast<double>());
      }
    }
    auto& K = cached.k[static_cast<std::size_t>(g)];
    auto& V = cached.v[static_cast<std::size_t>(g)];
    K.resize(static_cast<Index>(ks.size()), config.head_dim);
    V.resize(static_cast<Index>(vs.size()), config.head_dim);
    for (std::size_t i = 0; i < ks.size(); ++i) {
      K.row(static_cast<Index>(i)) = ks[i];
      V.row(static_cast<Index>(i)) = vs[i];
    }
  }
  return attention_step(config, layer, x, pos, cached);
}

template AttentionResult attention_step(const ModelConfig&, const LayerWeights&, const Eigen::RowVectorXd&, int,
                                        std::span<const KVBlock<float>>);
template AttentionResult attention_step(const ModelConfig&, const LayerWeights&, const Eigen::RowVectorXd&, int,
                                        std::span<const KVBlock<double>>);

// ---------------------------------------------------------------------------
// Model

Model::Model(Weights weights) : weights_(std::move(weights)) { weights_.validate(); }

Eigen::RowVectorXd Model::rms_norm(const Eigen::RowVectorXd& x, const Eigen::VectorXd& gain) const {
  return rms_norm_rows(Eigen::MatrixXd(x), gain, config().norm_eps);
}

void Model::check_token(Token token) const {
  if (token < 0 || token >= config().vocab)
    throw Error(ErrorCode::kInvalidToken, "token " + std::to_string(token) + " outside vocab of " +
                                              std::to_string(config().vocab));
}

template <typename Scalar>
Eigen::RowVectorXd Model::decode_step(PagedKVCache<Scalar>& cache, Token token) const {
  check_token(token);
  const ModelConfig& c = config();
  if (cache.layers() != c.layers || cache.kv_heads() != c.kv_heads || cache.head_dim() != c.head_dim)
    throw Error(ErrorCode::kCacheInconsistency, "cache geometry does not match the model");
  // Gather before reserving so each layer sees exactly the previous positions.
  const int pos = cache.seq_len();
  Eigen::MatrixXd x = weights_.embedding.row(token);
  std::vector<AttentionResult> pending;
  for (int l = 0; l < c.layers; ++l) {
    const auto& lw = weights_.layers[static_cast<std::size_t>(l)];
    const GatheredLayer cached = gather_layer(cache, l);
    AttentionResult res = attention_step(c, lw, rms_norm(x.row(0), lw.attn_norm), pos, cached);
    x.row(0) += res.output;
    mlp_residual(c, lw, x);
    pending.push_back(std::move(res));
  }
  cache.reserve_position();
  for (int l = 0; l < c.layers; ++l)
    for (int g = 0; g < c.kv_heads; ++g)
      cache.write(l, g, pos, pending[static_cast<std::size_t>(l)].new_k.row(g),
                  pending[static_cast<std::size_t>(l)].new_v.row(g));
  return rms_norm(x.row(0), weights_.final_norm) * weights_.embedding.transpose();
}

template <typename Scalar>
Eigen::MatrixXd Model::prefill(std::span<const Token> tokens, PagedKVCache<Scalar>& cache) const {
  Eigen::MatrixXd logits(static_cast<Index>(tokens.size()), config().vocab);
  for (std::size_t i = 0; i < tokens.size(); ++i) logits.row(static_cast<Index>(i)) = decode_step(cache, tokens[i]);
  return logits;
}

template <typename Scalar>
std::vector<Token> Model::greedy_continue(PagedKVCache<Scalar>& cache, const Eigen::RowVectorXd& last_logits,
                                          int steps) const {
  std::vector<Token> out;
  Eigen::RowVectorXd logits = last_logits;
  for (int s = 0; s < steps; ++s) {
    const Token next = argmax(logits);
    out.push_back(next);
    if (s + 1 < steps) logits = decode_step(cache, next);
  }
  return out;
}

template Eigen::RowVectorXd Model::decode_step(PagedKVCache<float>&, Token) const;
template Eigen::RowVectorXd Model::decode_step(PagedKVCache<double>&, Token) const;
template Eigen::MatrixXd Model::prefill(std::span<const Token>, PagedKVCache<float>&) const;
template Eigen::MatrixXd Model::prefill(std::span<const Token>, PagedKVCache<double>&) const;
template std::vector<Token> Model::greedy_continue(PagedKVCache<float>&, const Eigen::RowVectorXd&, int) const;
template std::vector<Token> Model::greedy_continue(PagedKVCache<double>&, const Eigen::RowVectorXd&, int) const;

Eigen::MatrixXd Model::forward_full(std::span<const Token> tokens) const {
  const ModelConfig& c = config();
  const Index n = static_cast<Index>(tokens.size());
  const int d = c.head_dim;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));
  Eigen::MatrixXd x(n, c.hidden);
  for (Index i = 0; i < n; ++i) {
    check_token(tokens[static_cast<std::size_t>(i)]);
    x.row(i) = weights_.embedding.row(tokens[static_cast<std::size_t>(i)]);
  }
  for (const auto& lw : weights_.layers) {
    const Eigen::MatrixXd xn = rms_norm_rows(x, lw.attn_norm, c.norm_eps);
    Eigen::MatrixXd q = xn * lw.wq.transpose(), k = xn * lw.wk.transpose(), v = xn * lw.wv.transpose();
    for (Index i = 0; i < n; ++i) {
      const Eigen::MatrixXd r = rope_matrix<double>(d, i, c.rope_base);
      for (int h = 0; h < c.heads; ++h) q.block(i, h * d, 1, d) = q.block(i, h * d, 1, d) * r;
      for (int g = 0; g < c.kv_heads; ++g) k.block(i, g * d, 1, d) = k.block(i, g * d, 1, d) * r;
    }
    Eigen::MatrixXd ctx = Eigen::MatrixXd::Zero(n, c.hidden);
    for (int h = 0; h < c.heads; ++h) {
      const int g = h / c.group_size();
      for (Index i = 0; i < n; ++i) {
        Eigen::RowVectorXd s = (q.block(i, h * d, 1, d) * k.block(0, g * d, i + 1, d).transpose()) * scale;
        softmax_inplace(s);
        ctx.block(i, h * d, 1, d) = s * v.block(0, g * d, i + 1, d);
      }
    }
    x += ctx * lw.wo.transpose();
    mlp_residual(c, lw, x);
  }
  return rms_norm_rows(x, weights_.final_norm, c.norm_eps) * weights_.embedding.transpose();
}

CandidateKV Model::candidate_kv(const std::vector<GatheredLayer>& prefix_layers, int pos,
                                std::span<const Token> candidates, int layer) const {
  const ModelConfig& c = config();
  if (layer < 0 || layer >= c.layers) throw Error(ErrorCode::kIndexOutOfRange, "layer " + std::to_string(layer));
  if (prefix_layers.size() < static_cast<std::size_t>(layer))
    throw Error(ErrorCode::kCacheInconsistency, "prefix layers missing");
  Eigen::MatrixXd x(static_cast<Index>(candidates.size()), c.hidden);
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    check_token(candidates[i]);
    x.row(static_cast<Index>(i)) = weights_.embedding.row(candidates[i]);
  }
  for (int l = 0;; ++l) {
    const auto& lw = weights_.layers[static_cast<std::size_t>(l)];
    Projected p = project(c, lw, rms_norm_rows(x, lw.attn_norm, c.norm_eps), pos);
    if (l == layer) return {std::move(p.k), std::move(p.v)};
    const auto& cached = prefix_layers[static_cast<std::size_t>(l)];
    check_cached(c, cached, pos);
    x += attend(c, p, cached, nullptr) * lw.wo.transpose();
    mlp_residual(c, lw, x);
  }
}

int argmax(const Eigen::RowVectorXd& logits) {
  Index best = 0;
  logits.maxCoeff(&best);
  return static_cast<int>(best);
}

// ---------------------------------------------------------------------------
// Files

void save_weights(const Weights& weights, const std::filesystem::path& path) {
  weights.validate();
  Container c;
  c.kind = "weights";
  c.meta["config"] = weights.config;
  c.add("embedding", weights.embedding);
  c.add("final_norm", weights.final_norm);
  for (std::size_t l = 0; l < weights.layers.size(); ++l) {
    const auto& lw = weights.layers[l];
    const std::string p = "layer" + std::to_string(l) + ".";
    c.add(p + "wq", lw.wq);
    c.add(p + "wk", lw.wk);
    c.add(p + "wv", lw.wv);
    c.add(p + "wo", lw.wo);
    c.add(p + "attn_norm", lw.attn_norm);
    if (weights.config.mlp) {
      c.add(p + "w_up", lw.w_up);
      c.add(p + "w_down", lw.w_down);
      c.add(p + "mlp_norm", lw.mlp_norm);
    }
  }
  write_container(c, path);
}

Weights load_weights(const std::filesystem::path& path) {
  const Container c = read_container(path, "weights");
  Weights w;
  try {
    w.config = c.meta.at("config").get<ModelConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("weights config: ") + e.what());
  }
  w.embedding = c.matrix_f64("embedding");
  w.final_norm = c.vector_f64("final_norm");
  for (int l = 0; l < w.config.layers; ++l) {
    const std::string p = "layer" + std::to_string(l) + ".";
    LayerWeights lw;
    lw.wq = c.matrix_f64(p + "wq");
    lw.wk = c.matrix_f64(p + "wk");
    lw.wv = c.matrix_f64(p + "wv");
    lw.wo = c.matrix_f64(p + "wo");
    lw.attn_norm = c.vector_f64(p + "attn_norm");
    if (w.config.mlp) {
      lw.w_up = c.matrix_f64(p + "w_up");
      lw.w_down = c.matrix_f64(p + "w_down");
      lw.mlp_norm = c.vector_f64(p + "mlp_norm");
    }
    w.layers.push_back(std::move(lw));
  }
  w.validate();
  return w;
}

template <typename Scalar>
void save_cache(const PagedKVCache<Scalar>& cache, const std::filesystem::path& path) {
  Container c;
  c.kind = "kv_cache";
  c.meta["layers"] = cache.layers();
  c.meta["kv_heads"] = cache.kv_heads();
  c.meta["head_dim"] = cache.head_dim();
  c.meta["block_size"] = cache.block_size();
  c.meta["seq_len"] = cache.seq_len();
  c.meta["dtype"] = std::is_same_v<Scalar, float> ? "f32" : "f64";
  c.meta["tables"] = cache.tables();
  nlohmann::json blocks = nlohmann::json::array();
  for (std::size_t i = 0; i < cache.blocks().size(); ++i) {
    const auto& b = cache.blocks()[i];
    blocks.push_back({{"layer", b.layer}, {"head", b.head}, {"fill", b.fill}, {"state", to_string(b.state)}});
    const std::string p = "block" + std::to_string(i) + ".";
    c.add(p + "k", Matrix<Scalar>(b.k));
    c.add(p + "v", Matrix<Scalar>(b.v));
    c.add(p + "slots", b.slots);
  }
  c.meta["blocks"] = std::move(blocks);
  write_container(c, path);
}

template void save_cache(const PagedKVCache<float>&, const std::filesystem::path&);
template void save_cache(const PagedKVCache<double>&, const std::filesystem::path&);

KVCache load_cache(const std::filesystem::path& path) {
  const Container c = read_container(path, "kv_cache");
  try {
    if (c.meta.at("dtype").get<std::string>() != "f32")
      throw Error(ErrorCode::kParse, "only single-precision cache files can be loaded");
    KVCache cache(c.meta.at("layers").get<int>(), c.meta.at("kv_heads").get<int>(), c.meta.at("head_dim").get<int>(),
                  c.meta.at("block_size").get<int>());
    std::vector<KVBlock<float>> blocks;
    const auto& meta_blocks = c.meta.at("blocks");
    for (std::size_t i = 0; i < meta_blocks.size(); ++i) {
      const auto& mb = meta_blocks[i];
      const std::string p = "block" + std::to_string(i) + ".";
      KVBlock<float> b;
      b.layer = mb.at("layer").get<int>();
      b.head = mb.at("head").get<int>();
      b.fill = mb.at("fill").get<int>();
      b.state = block_state_from_string(mb.at("state").get<std::string>());
      b.k = c.matrix_f32(p + "k");
      b.v = c.matrix_f32(p + "v");
      b.slots = c.ints(p + "slots");
      blocks.push_back(std::move(b));
    }
    cache.set_layout(c.meta.at("seq_len").get<int>(), c.meta.at("tables").get<std::vector<std::vector<int>>>(),
                     std::move(blocks));
    return cache;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("cache header: ") + e.what());
  }
}

}  // namespace kvlab
