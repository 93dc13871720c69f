#include "fils/model.hpp"

#include "fils/synthgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace fils {

namespace {

constexpr double kPosStd = 0.02;

}  // namespace

nlohmann::json ModelConfig::to_json() const {
  return {
      {"embed_dim", encoder.embed_dim},
      {"depth", encoder.depth},
      {"heads", encoder.heads},
      {"mlp_ratio", encoder.mlp_ratio},
      {"token_raw_dim", encoder.token_raw_dim},
      {"max_tokens", encoder.max_tokens},
      {"grid", {grid.t, grid.y, grid.x}},
      {"predictor_dim", predictor_dim},
      {"predictor_depth", predictor_depth},
      {"predictor_heads", predictor_heads},
      {"head_hidden", head_hidden},
      {"head_bias", head_bias},
      {"text_dim", text_dim},
      {"text_depth", text_depth},
      {"text_heads", text_heads},
      {"text_max_len", text_max_len},
      {"text_frozen", text_frozen},
      {"pixel_predictor", pixel_predictor},
      {"sigma_init", sigma_init},
  };
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.encoder.embed_dim = j.value("embed_dim", c.encoder.embed_dim);
  c.encoder.depth = j.value("depth", c.encoder.depth);
  c.encoder.heads = j.value("heads", c.encoder.heads);
  c.encoder.mlp_ratio = j.value("mlp_ratio", c.encoder.mlp_ratio);
  c.encoder.token_raw_dim = j.value("token_raw_dim", c.encoder.token_raw_dim);
  c.encoder.max_tokens = j.value("max_tokens", c.encoder.max_tokens);
  if (j.contains("grid")) {
    const auto& g = j.at("grid");
    c.grid = {g.at(0).get<int>(), g.at(1).get<int>(), g.at(2).get<int>()};
  }
  c.predictor_dim = j.value("predictor_dim", c.predictor_dim);
  c.predictor_depth = j.value("predictor_depth", c.predictor_depth);
  c.predictor_heads = j.value("predictor_heads", c.predictor_heads);
  c.head_hidden = j.value("head_hidden", c.head_hidden);
  c.head_bias = j.value("head_bias", c.head_bias);
  c.text_dim = j.value("text_dim", c.text_dim);
  c.text_depth = j.value("text_depth", c.text_depth);
  c.text_heads = j.value("text_heads", c.text_heads);
  c.text_max_len = j.value("text_max_len", c.text_max_len);
  c.text_frozen = j.value("text_frozen", c.text_frozen);
  c.pixel_predictor = j.value("pixel_predictor", c.pixel_predictor);
  c.sigma_init = j.value("sigma_init", c.sigma_init);
  return c;
}

FactorizedPosition::FactorizedPosition(nn::ParamLayout& layout, const std::string& name,
                                       GridDims g, Index d)
    : grid(g), dim(d) {
  t = layout.add(name + ".t", g.t, d, nn::Init::normal, kPosStd);
  y = layout.add(name + ".y", g.y, d, nn::Init::normal, kPosStd);
  x = layout.add(name + ".x", g.x, d, nn::Init::normal, kPosStd);
}

template <typename T>
void FactorizedPosition::add(std::span<const T> p, const std::vector<TubeCoord>& coords,
                             Mat<T>& out) const {
  const auto pt = nn::view(p, t, grid.t, dim);
  const auto py = nn::view(p, y, grid.y, dim);
  const auto px = nn::view(p, x, grid.x, dim);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto& c = coords[i];
    if (c.t < 0 || c.t >= grid.t || c.y < 0 || c.y >= grid.y || c.x < 0 || c.x >= grid.x)
      throw std::out_of_range("token coordinate outside the positional grid");
    out.row(static_cast<Index>(i)) += pt.row(c.t) + py.row(c.y) + px.row(c.x);
  }
}

template <typename T>
void FactorizedPosition::backward(std::span<T> g, const std::vector<TubeCoord>& coords,
                                  const Mat<T>& dx) const {
  auto gt = nn::view(g, t, grid.t, dim);
  auto gy = nn::view(g, y, grid.y, dim);
  auto gx = nn::view(g, x, grid.x, dim);
  for (std::size_t i = 0; i < coords.size(); ++i) {
    const auto row = dx.row(static_cast<Index>(i));
    gt.row(coords[i].t) += row;
    gy.row(coords[i].y) += row;
    gx.row(coords[i].x) += row;
  }
}

Encoder::Encoder(nn::ParamLayout& layout, const EncoderConfig& c, GridDims grid) : cfg(c) {
  embed = nn::Linear(layout, "encoder.embed", c.token_raw_dim, c.embed_dim);
  pos = FactorizedPosition(layout, "encoder.pos", grid, c.embed_dim);
  stack = nn::TransformerStack(layout, "encoder", c.embed_dim, c.depth, c.heads, c.mlp_ratio);
}

template <typename T>
Mat<T> Encoder::forward(std::span<const T> p, const Mat<T>& tokens,
                        const std::vector<TubeCoord>& coords, EncoderCache<T>* cache) const {
  if (tokens.rows() == 0) throw std::invalid_argument("encoder needs at least one token");
  if (tokens.rows() > cfg.max_tokens)
    throw std::invalid_argument("token count " + std::to_string(tokens.rows()) +
                                " exceeds max_tokens " + std::to_string(cfg.max_tokens));
  if (static_cast<Index>(coords.size()) != tokens.rows())
    throw std::invalid_argument("token and coordinate counts differ");
  Mat<T> x;
  embed.forward(p, tokens, x);
  pos.add(p, coords, x);
  if (cache) cache->tokens = tokens;
  return stack.forward(p, std::move(x), cache ? &cache->stack : nullptr);
}

template <typename T>
void Encoder::backward(std::span<const T> p, std::span<T> g, const std::vector<TubeCoord>& coords,
                       const EncoderCache<T>& cache, const Mat<T>& dy) const {
  const Mat<T> dx = stack.backward(p, g, cache.stack, dy);
  pos.backward(g, coords, dx);
  embed.backward<T>(p, g, cache.tokens, dx, nullptr);
}

Predictor::Predictor(nn::ParamLayout& layout, const ModelConfig& c)
    : dim(c.predictor_dim),
      out_dim(c.pixel_predictor ? c.encoder.token_raw_dim : c.encoder.embed_dim) {
  in = nn::Linear(layout, "predictor.in", c.encoder.embed_dim, dim);
  mask_token = layout.add("predictor.mask_token", 1, dim, nn::Init::normal, kPosStd);
  pos = FactorizedPosition(layout, "predictor.pos", c.grid, dim);
  stack = nn::TransformerStack(layout, "predictor", dim, c.predictor_depth, c.predictor_heads,
                               c.encoder.mlp_ratio);
  out = nn::Linear(layout, "predictor.out", dim, out_dim);
}

template <typename T>
Mat<T> Predictor::forward(std::span<const T> p, const Mat<T>& visible,
                          const std::vector<TubeCoord>& visible_coords,
                          const std::vector<TubeCoord>& masked_coords,
                          PredictorCache<T>* cache) const {
  if (masked_coords.empty()) throw std::invalid_argument("predictor needs at least one masked position");
  const Index nv = visible.rows();
  const Index nm = static_cast<Index>(masked_coords.size());
  Mat<T> seq(nv + nm, dim);
  if (nv > 0) {
    Mat<T> h;
    in.forward(p, visible, h);
    pos.add(p, visible_coords, h);
    seq.topRows(nv) = h;
  }
  Mat<T> m = Eigen::Map<const RowVec<T>>(p.data() + mask_token, dim).replicate(nm, 1);
  pos.add(p, masked_coords, m);
  seq.bottomRows(nm) = m;
  const Mat<T> y = stack.forward(p, std::move(seq), cache ? &cache->stack : nullptr);
  Mat<T> hidden = y.bottomRows(nm);
  Mat<T> result;
  out.forward(p, hidden, result);
  if (cache) {
    cache->features = visible;
    cache->hidden = std::move(hidden);
    cache->visible = nv;
  }
  return result;
}

template <typename T>
Mat<T> Predictor::backward(std::span<const T> p, std::span<T> g,
                           const std::vector<TubeCoord>& visible_coords,
                           const std::vector<TubeCoord>& masked_coords,
                           const PredictorCache<T>& cache, const Mat<T>& dy) const {
  const Index nv = cache.visible;
  const Index nm = static_cast<Index>(masked_coords.size());
  Mat<T> d_hidden;
  out.backward(p, g, cache.hidden, dy, &d_hidden);
  Mat<T> d_seq = Mat<T>::Zero(nv + nm, dim);
  d_seq.bottomRows(nm) = d_hidden;
  const Mat<T> dx = stack.backward(p, g, cache.stack, d_seq);
  const Mat<T> dm = dx.bottomRows(nm);
  nn::view(g, mask_token, 1, dim) += RowVec<T>(dm.colwise().sum());
  pos.backward(g, masked_coords, dm);
  Mat<T> d_visible = Mat<T>::Zero(nv, cache.features.cols());
  if (nv > 0) {
    const Mat<T> dv = dx.topRows(nv);
    pos.backward(g, visible_coords, dv);
    in.backward(p, g, cache.features, dv, &d_visible);
  }
  return d_visible;
}

ProjectionHead::ProjectionHead(nn::ParamLayout& layout, Index in, Index hidden, Index out,
                               bool bias)
    : two_layer(hidden > 0) {
  if (two_layer) {
    first = nn::Linear(layout, "head.fc1", in, hidden, bias);
    second = nn::Linear(layout, "head.fc2", hidden, out, bias);
  } else {
    first = nn::Linear(layout, "head.fc", in, out, bias);
  }
}

template <typename T>
Mat<T> ProjectionHead::forward(std::span<const T> p, const Mat<T>& x, HeadCache<T>* cache) const {
  Mat<T> pre;
  first.forward(p, x, pre);
  if (!two_layer) {
    if (cache) cache->x = x;
    return pre;
  }
  Mat<T> act;
  kernels::omp::gelu_forward<T>(pre, act);
  Mat<T> y;
  second.forward(p, act, y);
  if (cache) {
    cache->x = x;
    cache->pre = std::move(pre);
    cache->act = std::move(act);
  }
  return y;
}

template <typename T>
Mat<T> ProjectionHead::backward(std::span<const T> p, std::span<T> g, const HeadCache<T>& cache,
                                const Mat<T>& dy) const {
  Mat<T> dx;
  if (!two_layer) {
    first.backward(p, g, cache.x, dy, &dx);
    return dx;
  }
  Mat<T> d_act, d_pre;
  second.backward(p, g, cache.act, dy, &d_act);
  kernels::omp::gelu_backward<T>(cache.pre, d_act, d_pre);
  first.backward(p, g, cache.x, d_pre, &dx);
  return dx;
}

TextEncoder::TextEncoder(nn::ParamLayout& layout, const ModelConfig& c)
    : vocab(synth::caption_vocabulary()), dim(c.text_dim), max_len(c.text_max_len) {
  for (std::size_t i = 0; i < vocab.size(); ++i) ids.emplace(vocab[i], static_cast<int>(i));
  table = layout.add("text.tokens", static_cast<Index>(vocab.size()) + 1, dim, nn::Init::normal,
                     kPosStd);
  positions = layout.add("text.pos", max_len, dim, nn::Init::normal, kPosStd);
  stack = nn::TransformerStack(layout, "text", dim, c.text_depth, c.text_heads, 4.0);
}

std::vector<int> TextEncoder::tokenize(const std::string& caption) const {
  std::istringstream words(caption);
  std::vector<int> out;
  for (std::string w; words >> w;) {
    std::transform(w.begin(), w.end(), w.begin(),
                   [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
    const auto it = ids.find(w);
    out.push_back(it == ids.end() ? unk() : it->second);
  }
  if (out.empty()) throw std::invalid_argument("empty caption");
  if (static_cast<Index>(out.size()) > max_len) out.resize(static_cast<std::size_t>(max_len));
  return out;
}

template <typename T>
Mat<T> TextEncoder::forward(std::span<const T> p, const std::string& caption,
                            TextCache<T>* cache) const {
  const std::vector<int> tok = tokenize(caption);
  const Index n = static_cast<Index>(tok.size());
  const auto emb = nn::view(p, table, static_cast<Index>(vocab.size()) + 1, dim);
  const auto pos = nn::view(p, positions, max_len, dim);
  Mat<T> x(n, dim);
  for (Index i = 0; i < n; ++i) x.row(i) = emb.row(tok[static_cast<std::size_t>(i)]) + pos.row(i);
  const Mat<T> y = stack.forward(p, std::move(x), cache ? &cache->stack : nullptr);
  if (cache) cache->ids = tok;
  Mat<T> h = y.colwise().mean();
  return h;
}

template <typename T>
void TextEncoder::backward(std::span<const T> p, std::span<T> g, const TextCache<T>& cache,
                           const Mat<T>& dh) const {
  const Index n = static_cast<Index>(cache.ids.size());
  const Mat<T> dy = (dh / static_cast<T>(n)).replicate(n, 1);
  const Mat<T> dx = stack.backward(p, g, cache.stack, dy);
  auto emb = nn::view(g, table, static_cast<Index>(vocab.size()) + 1, dim);
  auto pos = nn::view(g, positions, max_len, dim);
  for (Index i = 0; i < n; ++i) {
    emb.row(cache.ids[static_cast<std::size_t>(i)]) += dx.row(i);
    pos.row(i) += dx.row(i);
  }
}

std::string_view name(PoolStrategy s) {
  return s == PoolStrategy::patch ? "patch" : "patch-average";
}

PoolStrategy pool_strategy_from_name(std::string_view s) {
  if (s == "patch-average") return PoolStrategy::patch_average;
  if (s == "patch") return PoolStrategy::patch;
  throw std::invalid_argument("unknown pooling strategy '" + std::string(s) + "'");
}

Pooling action_pooling(const std::vector<TubeCoord>& coords, const ActionArea& area,
                       PoolStrategy strategy, Rng& rng) {
  Pooling pool;
  for (std::size_t i = 0; i < coords.size(); ++i)
    if (area.contains(coords[i].y, coords[i].x)) pool.rows.push_back(static_cast<Index>(i));
  if (pool.rows.empty()) throw std::invalid_argument("action area selects no token");
  if (strategy == PoolStrategy::patch) {
    const Index pick = pool.rows[uniform_index(rng, pool.rows.size())];
    pool.rows = {pick};
  }
  pool.weight = 1.0 / static_cast<double>(pool.rows.size());
  return pool;
}

template <typename T>
Mat<T> pool_rows(const Mat<T>& features, const Pooling& pooling) {
  Mat<T> out = Mat<T>::Zero(1, features.cols());
  for (const Index r : pooling.rows) out += features.row(r);
  out *= static_cast<T>(pooling.weight);
  return out;
}

template <typename T>
void pool_rows_backward(const Pooling& pooling, const Mat<T>& dpooled, Mat<T>& dfeatures) {
  const Mat<T> scaled = dpooled * static_cast<T>(pooling.weight);
  for (const Index r : pooling.rows) dfeatures.row(r) += scaled;
}

template <typename T>
Mat<T> project_and_normalize(const ProjectionHead* head, std::span<const T> p, const Mat<T>& x) {
  if (!head) return nn::normalize_rows<T>(x);
  return nn::normalize_rows<T>(head->forward<T>(p, x, nullptr));
}

FilsModel::FilsModel(const ModelConfig& cfg) : cfg_(cfg) {
  if (cfg.encoder.max_tokens < cfg.grid.count())
    throw std::invalid_argument("max_tokens is smaller than the token grid");
  encoder = Encoder(layout_, cfg.encoder, cfg.grid);
  encoder_size_ = layout_.size();
  predictor = Predictor(layout_, cfg);
  head = ProjectionHead(layout_, cfg.encoder.embed_dim, cfg.head_hidden, cfg.text_dim, cfg.head_bias);
  text_begin_ = layout_.size();
  text = TextEncoder(layout_, cfg);
  text_end_ = layout_.size();
  log_sigma_ = layout_.add("log_sigma", 1, 1, nn::Init::zeros);
}

bool FilsModel::trainable(const nn::ParamSlot& slot) const {
  return !(cfg_.text_frozen && slot.offset >= text_begin_ && slot.offset < text_end_);
}

std::vector<float> FilsModel::init_params(std::uint64_t seed) const {
  std::vector<float> params(static_cast<std::size_t>(layout_.size()));
  Rng rng(seed);
  layout_.initialize(params, rng);
  params[static_cast<std::size_t>(log_sigma_)] = static_cast<float>(std::log(cfg_.sigma_init));
  return params;
}

#define FILS_MODEL_INSTANTIATE(T)                                                             \
  template void FactorizedPosition::add<T>(std::span<const T>, const std::vector<TubeCoord>&, \
                                           Mat<T>&) const;                                    \
  template void FactorizedPosition::backward<T>(std::span<T>, const std::vector<TubeCoord>&,  \
                                                const Mat<T>&) const;                         \
  template Mat<T> Encoder::forward<T>(std::span<const T>, const Mat<T>&,                      \
                                      const std::vector<TubeCoord>&, EncoderCache<T>*) const; \
  template void Encoder::backward<T>(std::span<const T>, std::span<T>,                        \
                                     const std::vector<TubeCoord>&, const EncoderCache<T>&,   \
                                     const Mat<T>&) const;                                    \
  template Mat<T> Predictor::forward<T>(std::span<const T>, const Mat<T>&,                    \
                                        const std::vector<TubeCoord>&,                        \
                                        const std::vector<TubeCoord>&, PredictorCache<T>*)    \
      const;                                                                                  \
  template Mat<T> Predictor::backward<T>(std::span<const T>, std::span<T>,                    \
                                         const std::vector<TubeCoord>&,                       \
                                         const std::vector<TubeCoord>&,                       \
                                         const PredictorCache<T>&, const Mat<T>&) const;      \
  template Mat<T> ProjectionHead::forward<T>(std::span<const T>, const Mat<T>&, HeadCache<T>*) \
      const;                                                                                  \
  template Mat<T> ProjectionHead::backward<T>(std::span<const T>, std::span<T>,               \
                                              const HeadCache<T>&, const Mat<T>&) const;      \
  template Mat<T> TextEncoder::forward<T>(std::span<const T>, const std::string&,             \
                                          TextCache<T>*) const;                               \
  template void TextEncoder::backward<T>(std::span<const T>, std::span<T>,                    \
                                         const TextCache<T>&, const Mat<T>&) const;           \
  template Mat<T> pool_rows<T>(const Mat<T>&, const Pooling&);                                \
  template void pool_rows_backward<T>(const Pooling&, const Mat<T>&, Mat<T>&);                \
  template Mat<T> project_and_normalize<T>(const ProjectionHead*, std::span<const T>,         \
                                           const Mat<T>&);

FILS_MODEL_INSTANTIATE(float)
FILS_MODEL_INSTANTIATE(double)

#undef FILS_MODEL_INSTANTIATE

}  // namespace fils
