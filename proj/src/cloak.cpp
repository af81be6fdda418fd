#include "kvlab/cloak.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "kvlab/container.hpp"

namespace kvlab {

namespace {

void check_geometry(const KVBlock<float>& block, const CloakKey& key) {
  if (block.block_size() != key.block_size || block.k.cols() != key.head_dim)
    throw Error(ErrorCode::kKey, "block is " + std::to_string(block.block_size()) + "x" +
                                     std::to_string(block.k.cols()) + " but the key is for " +
                                     std::to_string(key.block_size) + "x" + std::to_string(key.head_dim));
}

// Rows in slot order; padding slots hold the constant pad value.
Eigen::MatrixXd canonical_rows(const Matrix<float>& rows, const KVBlock<float>& block, double pad) {
  Eigen::MatrixXd out(rows.rows(), rows.cols());
  for (int slot = 0; slot < block.block_size(); ++slot) {
    if (slot < block.fill)
      out.row(slot) = rows.row(block.row_of_slot(slot)).cast<double>();
    else
      out.row(slot).setConstant(pad);
  }
  return out;
}

// Multiplies the head-sized row blocks [h d, (h+1) d) of `w` by `m` from the left.
void left_multiply_heads(Eigen::MatrixXd& w, const Eigen::MatrixXd& m, int heads, int d) {
  for (int h = 0; h < heads; ++h) w.middleRows(h * d, d) = m * w.middleRows(h * d, d);
}

struct Identified {
  std::vector<int> ids;
  Eigen::MatrixXd rows;  // identifiers removed
};

Identified identify(const Eigen::MatrixXd& y, const Eigen::MatrixXd& mask, double theta, double factor,
                    const char* which) {
  Identified out{std::vector<int>(static_cast<std::size_t>(y.rows())), y};
  const double limit = factor * theta;
  for (Index r = 0; r < y.rows(); ++r) {
    int found = -1, count = 0;
    for (Index c = 0; c < y.cols(); ++c)
      if (std::abs(y(r, c)) > limit) {
        found = static_cast<int>(c);
        ++count;
      }
    if (count != 1 || found >= mask.rows())
      throw Error(ErrorCode::kCorruption, std::string(which) + " row " + std::to_string(r) + " has " +
                                              std::to_string(count) + " outlier columns");
    out.ids[static_cast<std::size_t>(r)] = found;
    out.rows.row(r) -= mask.row(found);
  }
  return out;
}

Matrix<float> to_float(const Eigen::MatrixXd& m) { return m.cast<float>(); }

KVBlock<float> seal(const KVBlock<float>& block, const Eigen::MatrixXd& k, const Eigen::MatrixXd& v,
                    const CloakKey& key, Rng& rng, const Permutation* forced) {
  const Permutation p = forced ? *forced : sample_permutation(key.block_size, rng);
  if (p.size() != key.block_size) throw Error(ErrorCode::kDimensionMismatch, "forced permutation has the wrong size");
  KVBlock<float> out = block;
  out.k = to_float(key.s * p.apply_rows(k + key.a_k));
  out.v = to_float(key.s * p.apply_rows(v + key.a_v));
  out.slots = Permutation::identity(key.block_size).mapping();
  out.state = BlockState::kCloaked;
  return out;
}

struct Opened {
  Eigen::MatrixXd k, v;
  std::vector<int> ids;
  int fill = 0;
};

Opened open(const KVBlock<float>& block, const CloakKey& key, bool use_fill_metadata) {
  if (block.state != BlockState::kCloaked) throw Error(ErrorCode::kCacheInconsistency, "block is not cloaked");
  check_geometry(block, key);
  const Eigen::MatrixXd st = key.s.transpose();
  Identified k = identify(st * block.k.cast<double>(), key.a_k, key.theta_k, key.outlier_factor, "key");
  Identified v = identify(st * block.v.cast<double>(), key.a_v, key.theta_v, key.outlier_factor, "value");
  std::vector<char> seen(static_cast<std::size_t>(key.block_size), 0);
  for (std::size_t r = 0; r < k.ids.size(); ++r) {
    if (k.ids[r] != v.ids[r])
      throw Error(ErrorCode::kCorruption, "row " + std::to_string(r) + " carries different key/value identifiers");
    if (seen[static_cast<std::size_t>(k.ids[r])]++)
      throw Error(ErrorCode::kCorruption, "identifier " + std::to_string(k.ids[r]) + " recovered twice");
  }
  Opened out{std::move(k.rows), std::move(v.rows), std::move(k.ids), block.fill};
  if (!use_fill_metadata) {
    auto padding = [&](Index r) {
      auto band = [](const Eigen::MatrixXd& m, Index row, double theta, double factor) {
        const double lo = (factor - 0.25) * theta, hi = (factor + 0.25) * theta;
        return ((m.row(row).array() >= lo) && (m.row(row).array() <= hi)).all();
      };
      return band(out.k, r, key.theta_k, key.pad_value_factor) && band(out.v, r, key.theta_v, key.pad_value_factor);
    };
    out.fill = 0;
    for (Index r = 0; r < out.k.rows(); ++r) out.fill += padding(r) ? 0 : 1;
    for (Index r = 0; r < out.k.rows(); ++r)
      if ((out.ids[static_cast<std::size_t>(r)] < out.fill) == padding(r))
        throw Error(ErrorCode::kCorruption, "padding rows do not occupy the trailing slots");
  }
  for (Index r = 0; r < out.k.rows(); ++r)
    if (out.ids[static_cast<std::size_t>(r)] >= out.fill) {
      out.k.row(r).setZero();
      out.v.row(r).setZero();
    }
  return out;
}

KVBlock<float> opened_block(const KVBlock<float>& block, Opened&& o) {
  KVBlock<float> out = block;
  out.k = to_float(o.k);
  out.v = to_float(o.v);
  out.fill = o.fill;
  out.slots = std::move(o.ids);
  out.state = BlockState::kPlaintext;
  return out;
}

}  // namespace

void CloakKey::validate() const {
  auto fail = [](const std::string& what) { throw Error(ErrorCode::kKey, "cloak key: " + what); };
  if (block_size < 1 || head_dim < 2) fail("bad dimensions");
  if (block_size > head_dim) fail("block size exceeds head dimension; identifiers cannot be embedded");
  if (s.rows() != block_size || s.cols() != block_size) fail("S has the wrong shape");
  if (max_abs_diff(s.transpose() * s, Eigen::MatrixXd::Identity(block_size, block_size)) > 1e-10)
    fail("S is not orthogonal");
  m1.validate();
  m2.validate();
  if (m1.dim() != head_dim || m2.dim() != head_dim) fail("M1/M2 dimension differs from head_dim");
  if (a_k.rows() != block_size || a_k.cols() != head_dim || a_v.rows() != block_size || a_v.cols() != head_dim)
    fail("mask shape");
  if (!(theta_k > 0.0) || !(theta_v > 0.0)) fail("thresholds are not calibrated");
  if (!(pad_value_factor < outlier_factor && outlier_factor <= mask_lo - 1.0 && mask_lo <= mask_hi))
    fail("factor ordering must leave data, padding and identifiers separable");
}

CloakKey sample_secrets(int block_size, int head_dim, Rng& rng, const KeygenOptions& options) {
  if (block_size < 1 || head_dim < 2 || head_dim % 2 != 0)
    throw Error(ErrorCode::kInvalidConfig, "cloak needs block_size >= 1 and an even head_dim");
  if (block_size > head_dim)
    throw Error(ErrorCode::kInvalidConfig, "block_size " + std::to_string(block_size) + " exceeds head_dim " +
                                               std::to_string(head_dim) + "; per-row identifiers need b <= d");
  CloakKey key;
  key.block_size = block_size;
  key.head_dim = head_dim;
  key.s = sample_orthogonal<double>(block_size, rng);
  key.m1 = make_commuting_key(head_dim, rng, options.bounds);
  key.m2 = make_commuting_key(head_dim, rng, options.bounds);
  key.a_k = Eigen::MatrixXd::Zero(block_size, head_dim);
  key.a_v = Eigen::MatrixXd::Zero(block_size, head_dim);
  key.outlier_factor = options.outlier_factor;
  key.pad_value_factor = options.pad_value_factor;
  key.mask_lo = options.mask_lo;
  key.mask_hi = options.mask_hi;
  key.stream_seed = rng();
  return key;
}

void calibrate_key(CloakKey& key, std::span<const KVBlock<float>> calibration, Rng& rng) {
  if (calibration.empty()) throw Error(ErrorCode::kInvalidConfig, "empty calibration set");
  double tk = 0.0, tv = 0.0;
  for (const auto& b : calibration)
    for (int r = 0; r < b.block_size(); ++r) {
      if (!b.row_valid(r)) continue;
      tk = std::max(tk, static_cast<double>(b.k.row(r).cwiseAbs().maxCoeff()));
      tv = std::max(tv, static_cast<double>(b.v.row(r).cwiseAbs().maxCoeff()));
    }
  if (!(tk > 0.0) || !(tv > 0.0)) throw Error(ErrorCode::kInvalidConfig, "calibration caches are all zero");
  key.theta_k = tk;
  key.theta_v = tv;
  std::uniform_real_distribution<double> unit(key.mask_lo, key.mask_hi);
  key.a_k.setZero(key.block_size, key.head_dim);
  key.a_v.setZero(key.block_size, key.head_dim);
  for (int i = 0; i < key.block_size; ++i) key.a_k(i, i) = unit(rng) * tk;
  for (int i = 0; i < key.block_size; ++i) key.a_v(i, i) = unit(rng) * tv;
  key.validate();
}

CloakKey keygen(const Weights& weights, std::span<const std::vector<Token>> calibration_corpus, Rng& rng,
                const KeygenOptions& options) {
  const ModelConfig& c = weights.config;
  CloakKey key = sample_secrets(c.block_size, c.head_dim, rng, options);
  const Model fused(fuse_weights(weights, key));
  std::vector<KVBlock<float>> blocks;
  for (const auto& seq : calibration_corpus) {
    KVCache cache(c);
    fused.prefill<float>(seq, cache);
    blocks.insert(blocks.end(), cache.blocks().begin(), cache.blocks().end());
  }
  calibrate_key(key, blocks, rng);
  return key;
}

Weights fuse_weights(const Weights& weights, const CloakKey& key) {
  const ModelConfig& c = weights.config;
  if (key.m1.dim() != c.head_dim || key.m2.dim() != c.head_dim)
    throw Error(ErrorCode::kKey, "key head_dim differs from the model");
  key.m1.validate();
  key.m2.validate();
  const Eigen::MatrixXd m1 = materialize(key.m1);
  const Eigen::MatrixXd m2 = materialize(key.m2);
  const Eigen::MatrixXd m1_inv = materialize(invert_key(key.m1));
  const Eigen::MatrixXd m2_inv_t = materialize(invert_key(key.m2)).transpose();
  Weights out = weights;
  const int d = c.head_dim;
  for (auto& lw : out.layers) {
    left_multiply_heads(lw.wq, m1_inv, c.heads, d);
    left_multiply_heads(lw.wk, m1.transpose(), c.kv_heads, d);
    left_multiply_heads(lw.wv, m2.transpose(), c.kv_heads, d);
    for (int h = 0; h < c.heads; ++h) lw.wo.middleCols(h * d, d) = lw.wo.middleCols(h * d, d) * m2_inv_t;
  }
  return out;
}

// ---------------------------------------------------------------------------

Eigen::MatrixXd obfuscate_naive(const Eigen::MatrixXd& k, const Eigen::MatrixXd& s, const Eigen::MatrixXd& m) {
  if (s.rows() != s.cols() || s.cols() != k.rows() || m.rows() != m.cols() || m.rows() != k.cols())
    throw Error(ErrorCode::kDimensionMismatch, "naive obfuscation needs S b x b, K b x d, M d x d");
  return s * k * m;
}

CpaRecovery cpa_break_naive(const BlockOracle& oracle, int b, int d) {
  if (b < 1 || d < 1) throw Error(ErrorCode::kInvalidDimension, "empty block");
  CpaRecovery out;
  const Eigen::MatrixXd base = oracle(Eigen::MatrixXd::Zero(b, d));
  ++out.queries;
  auto response = [&](int p, int q) {
    Eigen::MatrixXd e = Eigen::MatrixXd::Zero(b, d);
    e(p, q) = 1.0;
    ++out.queries;
    Eigen::MatrixXd r = oracle(e) - base;
    if (r.rows() != b || r.cols() != d) throw Error(ErrorCode::kDimensionMismatch, "oracle changed the block shape");
    return r;
  };

  const Eigen::MatrixXd r00 = response(0, 0);
  Index pivot = 0;
  const double pivot_norm = r00.colwise().norm().maxCoeff(&pivot);
  if (!(pivot_norm > 0.0)) throw Error(ErrorCode::kInconsistency, "zero response to the first basis query");
  const Eigen::VectorXd s0 = r00.col(pivot) / pivot_norm;

  out.m_hat.resize(d, d);
  out.m_hat.row(0) = s0.transpose() * r00;
  for (int q = 1; q < d; ++q) out.m_hat.row(q) = s0.transpose() * response(0, q);
  const double m0 = out.m_hat.row(0).squaredNorm();
  if (!(m0 > 0.0)) throw Error(ErrorCode::kInconsistency, "zero recovered row of M");

  out.s_hat.resize(b, b);
  out.s_hat.col(0) = r00 * out.m_hat.row(0).transpose() / m0;
  for (int p = 1; p < b; ++p) {
    out.s_hat.col(p) = response(p, 0) * out.m_hat.row(0).transpose() / m0;
    if (!(out.s_hat.col(p).norm() > 0.0))
      throw Error(ErrorCode::kInconsistency, "zero response for column " + std::to_string(p) + " of S");
  }
  return out;
}

// ---------------------------------------------------------------------------

std::uint64_t block_stream_seed(const CloakKey& key, int layer, int head, int block_id, std::uint64_t epoch) {
  return derive_seed(key.stream_seed, {static_cast<std::uint64_t>(layer), static_cast<std::uint64_t>(head),
                                       static_cast<std::uint64_t>(block_id), epoch});
}

KVBlock<float> obfuscate_block(const KVBlock<float>& block, const CloakKey& key, Rng& rng, const Permutation* forced) {
  if (block.state == BlockState::kCloaked) throw Error(ErrorCode::kDoubleObfuscation, "block is already cloaked");
  check_geometry(block, key);
  const Eigen::MatrixXd k = canonical_rows(block.k, block, key.pad_value_factor * key.theta_k);
  const Eigen::MatrixXd v = canonical_rows(block.v, block, key.pad_value_factor * key.theta_v);
  return seal(block, k, v, key, rng, forced);
}

DeobfuscatedBlock deobfuscate_block(const KVBlock<float>& block, const CloakKey& key, bool use_fill_metadata) {
  Opened o = open(block, key, use_fill_metadata);
  Permutation map(o.ids);
  return {opened_block(block, std::move(o)), std::move(map)};
}

KVBlock<float> obfuscate_block_unfused(const KVBlock<float>& block, const CloakKey& key, const Eigen::MatrixXd& m1,
                                       const Eigen::MatrixXd& m2, Rng& rng) {
  if (block.state == BlockState::kCloaked) throw Error(ErrorCode::kDoubleObfuscation, "block is already cloaked");
  check_geometry(block, key);
  Eigen::MatrixXd k = canonical_rows(block.k, block, 0.0) * m1;
  Eigen::MatrixXd v = canonical_rows(block.v, block, 0.0) * m2;
  for (int slot = block.fill; slot < key.block_size; ++slot) {
    k.row(slot).setConstant(key.pad_value_factor * key.theta_k);
    v.row(slot).setConstant(key.pad_value_factor * key.theta_v);
  }
  return seal(block, k, v, key, rng, nullptr);
}

KVBlock<float> deobfuscate_block_unfused(const KVBlock<float>& block, const CloakKey& key,
                                         const Eigen::MatrixXd& m1_inv, const Eigen::MatrixXd& m2_inv) {
  Opened o = open(block, key, true);
  o.k = o.k * m1_inv;
  o.v = o.v * m2_inv;
  return opened_block(block, std::move(o));
}

void cloak_cache(KVCache& cache, const CloakKey& key, std::uint64_t epoch) {
  for (std::size_t id = 0; id < cache.blocks().size(); ++id) {
    auto& b = cache.blocks()[id];
    if (b.state != BlockState::kPlaintext) continue;
    Rng rng(block_stream_seed(key, b.layer, b.head, static_cast<int>(id), epoch));
    b = obfuscate_block(b, key, rng);
  }
}

void decloak_cache(KVCache& cache, const CloakKey& key) {
  for (auto& b : cache.blocks())
    if (b.state == BlockState::kCloaked) b = deobfuscate_block(b, key).block;
}

Eigen::RowVectorXd cloaked_decode_step(const Model& fused, KVCache& cache, Token token, const CloakKey& key,
                                       std::uint64_t epoch) {
  KVCache work = cache;
  decloak_cache(work, key);
  const int pos = work.seq_len();
  Eigen::RowVectorXd logits = fused.decode_step(work, token);

  std::vector<char> touched(work.blocks().size(), 0);
  for (int l = 0; l < work.layers(); ++l)
    for (int h = 0; h < work.kv_heads(); ++h) touched[static_cast<std::size_t>(work.locate(l, h, pos).block_id)] = 1;
  std::vector<KVBlock<float>> blocks = work.blocks();
  for (std::size_t id = 0; id < blocks.size(); ++id) {
    if (!touched[id]) {
      blocks[id] = cache.blocks()[id];
      continue;
    }
    Rng rng(block_stream_seed(key, blocks[id].layer, blocks[id].head, static_cast<int>(id), epoch));
    blocks[id] = obfuscate_block(blocks[id], key, rng);
  }
  cache.set_layout(work.seq_len(), work.tables(), std::move(blocks));
  return logits;
}

FlopModel flop_model(std::int64_t b, std::int64_t d, std::int64_t hidden) {
  if (b < 1 || d < 1 || hidden < 1) throw Error(ErrorCode::kInvalidDimension, "flop model needs positive dims");
  FlopModel f;
  f.b = b;
  f.d = d;
  f.hidden = hidden;
  f.fused_mults = b * b * b + 2 * b * b * d;
  f.naive_mults = f.fused_mults + 2 * b * d * d;
  f.recompute_mults = b * hidden * d;
  f.naive_ratio = static_cast<double>(f.naive_mults) / static_cast<double>(f.recompute_mults);
  f.fused_ratio = static_cast<double>(f.fused_mults) / static_cast<double>(f.recompute_mults);
  f.fused_over_naive = static_cast<double>(f.fused_mults) / static_cast<double>(f.naive_mults);
  return f;
}

void save_key(const CloakKey& key, const std::filesystem::path& path) {
  key.validate();
  Container c;
  c.kind = "cloak_key";
  c.meta = {{"block_size", key.block_size},
            {"head_dim", key.head_dim},
            {"theta_k", key.theta_k},
            {"theta_v", key.theta_v},
            {"outlier_factor", key.outlier_factor},
            {"pad_value_factor", key.pad_value_factor},
            {"mask_lo", key.mask_lo},
            {"mask_hi", key.mask_hi},
            {"scale_lo", key.m1.bounds.lo},
            {"scale_hi", key.m1.bounds.hi},
            {"stream_seed", key.stream_seed}};
  c.add("s", key.s);
  c.add("m1_t", key.m1.t);
  c.add("m1_u", key.m1.u);
  c.add("m2_t", key.m2.t);
  c.add("m2_u", key.m2.u);
  std::vector<int> cols;
  Eigen::VectorXd vk(key.block_size), vv(key.block_size);
  for (int i = 0; i < key.block_size; ++i) {
    cols.push_back(i);
    vk(i) = key.a_k(i, i);
    vv(i) = key.a_v(i, i);
  }
  c.add("a_cols", cols);
  c.add("a_k_values", vk);
  c.add("a_v_values", vv);
  write_container(c, path);
}

CloakKey load_key(const std::filesystem::path& path) {
  const Container c = read_container(path, "cloak_key");
  CloakKey key;
  try {
    key.block_size = c.meta.at("block_size").get<int>();
    key.head_dim = c.meta.at("head_dim").get<int>();
    key.theta_k = c.meta.at("theta_k").get<double>();
    key.theta_v = c.meta.at("theta_v").get<double>();
    key.outlier_factor = c.meta.at("outlier_factor").get<double>();
    key.pad_value_factor = c.meta.at("pad_value_factor").get<double>();
    key.mask_lo = c.meta.at("mask_lo").get<double>();
    key.mask_hi = c.meta.at("mask_hi").get<double>();
    key.stream_seed = c.meta.at("stream_seed").get<std::uint64_t>();
    const ScaleBounds bounds{c.meta.at("scale_lo").get<double>(), c.meta.at("scale_hi").get<double>()};
    key.m1.bounds = bounds;
    key.m2.bounds = bounds;
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParse, std::string("key header: ") + e.what());
  }
  key.s = c.matrix_f64("s");
  key.m1.t = c.vector_f64("m1_t");
  key.m1.u = c.vector_f64("m1_u");
  key.m2.t = c.vector_f64("m2_t");
  key.m2.u = c.vector_f64("m2_u");
  const std::vector<int> cols = c.ints("a_cols");
  const Eigen::VectorXd vk = c.vector_f64("a_k_values"), vv = c.vector_f64("a_v_values");
  if (static_cast<int>(cols.size()) != key.block_size || vk.size() != key.block_size || vv.size() != key.block_size)
    throw Error(ErrorCode::kParse, "identifier arrays do not match block_size");
  key.a_k = Eigen::MatrixXd::Zero(key.block_size, key.head_dim);
  key.a_v = Eigen::MatrixXd::Zero(key.block_size, key.head_dim);
  for (int i = 0; i < key.block_size; ++i) {
    if (cols[static_cast<std::size_t>(i)] != i) throw Error(ErrorCode::kParse, "identifier column layout mismatch");
    key.a_k(i, i) = vk(i);
    key.a_v(i, i) = vv(i);
  }
  key.validate();
  return key;
}

}  // namespace kvlab
