#pragma once

// Video encoder (student and EMA teacher share it), masked-feature predictor,
// frozen toy text encoder, and the vision-to-text projection head.
//
// Every sub-network registers into one ParamLayout, encoder first, so the
// teacher is simply a buffer holding the first `encoder_size()` values.

#include "fils/action_area.hpp"
#include "fils/nn.hpp"
#include "fils/tokenize.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <unordered_map>
#include <vector>

namespace fils {

struct EncoderConfig {
  Index embed_dim = 128;
  Index depth = 4;
  Index heads = 4;
  double mlp_ratio = 4.0;
  Index token_raw_dim = 384;
  Index max_tokens = 512;
};

struct ModelConfig {
  EncoderConfig encoder;
  GridDims grid{8, 8, 8};
  Index predictor_dim = 64;
  Index predictor_depth = 2;
  Index predictor_heads = 4;
  Index head_hidden = 128;  // 0 makes the projection head a single linear map
  bool head_bias = true;
  Index text_dim = 64;
  Index text_depth = 2;
  Index text_heads = 4;
  Index text_max_len = 16;
  bool text_frozen = true;
  bool pixel_predictor = false;  // predictor emits raw patches (MSE baseline)
  double sigma_init = 0.07;

  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Learned positional tables indexed separately by t, y and x.
struct FactorizedPosition {
  GridDims grid;
  Index dim = 0;
  Index t = -1;
  Index y = -1;
  Index x = -1;

  FactorizedPosition() = default;
  FactorizedPosition(nn::ParamLayout& layout, const std::string& name, GridDims g, Index d);

  template <typename T>
  void add(std::span<const T> p, const std::vector<TubeCoord>& coords, Mat<T>& x) const;
  template <typename T>
  void backward(std::span<T> g, const std::vector<TubeCoord>& coords, const Mat<T>& dx) const;
};

template <typename T>
struct EncoderCache {
  Mat<T> tokens;
  nn::StackCache<T> stack;
};

struct Encoder {
  EncoderConfig cfg;
  nn::Linear embed;
  FactorizedPosition pos;
  nn::TransformerStack stack;

  Encoder() = default;
  Encoder(nn::ParamLayout& layout, const EncoderConfig& c, GridDims grid);

  // Output row i belongs to input row i. Throws when the sequence is empty or
  // longer than max_tokens.
  template <typename T>
  Mat<T> forward(std::span<const T> p, const Mat<T>& tokens, const std::vector<TubeCoord>& coords,
                 EncoderCache<T>* cache) const;

  template <typename T>
  void backward(std::span<const T> p, std::span<T> g, const std::vector<TubeCoord>& coords,
                const EncoderCache<T>& cache, const Mat<T>& dy) const;
};

template <typename T>
struct PredictorCache {
  Mat<T> features;
  nn::StackCache<T> stack;
  Mat<T> hidden;  // stack output rows at masked positions
  Index visible = 0;
};

struct Predictor {
  Index dim = 0;
  Index out_dim = 0;
  nn::Linear in;
  Index mask_token = -1;
  FactorizedPosition pos;
  nn::TransformerStack stack;
  nn::Linear out;

  Predictor() = default;
  Predictor(nn::ParamLayout& layout, const ModelConfig& c);

  // Sequence is [visible features; one mask token per masked coord]; returns
  // one row per masked coord. Throws when there is nothing to predict.
  template <typename T>
  Mat<T> forward(std::span<const T> p, const Mat<T>& visible,
                 const std::vector<TubeCoord>& visible_coords,
                 const std::vector<TubeCoord>& masked_coords, PredictorCache<T>* cache) const;

  // Returns the gradient w.r.t. the visible features.
  template <typename T>
  Mat<T> backward(std::span<const T> p, std::span<T> g, const std::vector<TubeCoord>& visible_coords,
                  const std::vector<TubeCoord>& masked_coords, const PredictorCache<T>& cache,
                  const Mat<T>& dy) const;
};

template <typename T>
struct HeadCache {
  Mat<T> x;
  Mat<T> pre;
  Mat<T> act;
};

struct ProjectionHead {
  nn::Linear first;
  nn::Linear second;  // unused when hidden == 0
  bool two_layer = false;

  ProjectionHead() = default;
  ProjectionHead(nn::ParamLayout& layout, Index in, Index hidden, Index out, bool bias);

  template <typename T>
  Mat<T> forward(std::span<const T> p, const Mat<T>& x, HeadCache<T>* cache) const;
  template <typename T>
  Mat<T> backward(std::span<const T> p, std::span<T> g, const HeadCache<T>& cache,
                  const Mat<T>& dy) const;
};

template <typename T>
struct TextCache {
  std::vector<int> ids;
  nn::StackCache<T> stack;
};

struct TextEncoder {
  std::vector<std::string> vocab;
  std::unordered_map<std::string, int> ids;
  Index dim = 0;
  Index max_len = 0;
  Index table = -1;
  Index positions = -1;
  nn::TransformerStack stack;

  TextEncoder() = default;
  TextEncoder(nn::ParamLayout& layout, const ModelConfig& c);

  int unk() const { return static_cast<int>(vocab.size()); }
  // Lowercased whitespace split; unknown words map to UNK. Throws on an empty
  // caption; words beyond max_len are dropped.
  std::vector<int> tokenize(const std::string& caption) const;

  // Mean-pooled embedding h, [1, dim].
  template <typename T>
  Mat<T> forward(std::span<const T> p, const std::string& caption, TextCache<T>* cache) const;
  template <typename T>
  void backward(std::span<const T> p, std::span<T> g, const TextCache<T>& cache,
                const Mat<T>& dh) const;
};

enum class PoolStrategy { patch_average, patch };

std::string_view name(PoolStrategy s);
PoolStrategy pool_strategy_from_name(std::string_view s);

// Which feature rows enter the pooled vector and with what weight.
struct Pooling {
  std::vector<Index> rows;
  double weight = 0.0;
};

// patch_average: every token whose spatial position is in the area, over all
// temporal indices. patch: one of those tokens drawn uniformly from `rng`.
Pooling action_pooling(const std::vector<TubeCoord>& coords, const ActionArea& area,
                       PoolStrategy strategy, Rng& rng);

template <typename T>
Mat<T> pool_rows(const Mat<T>& features, const Pooling& pooling);
template <typename T>
void pool_rows_backward(const Pooling& pooling, const Mat<T>& dpooled, Mat<T>& dfeatures);

// Projection head followed by row normalization. With `head == nullptr` only
// the normalization is applied (text side).
template <typename T>
Mat<T> project_and_normalize(const ProjectionHead* head, std::span<const T> p, const Mat<T>& x);

class FilsModel {
 public:
  explicit FilsModel(const ModelConfig& cfg);

  const ModelConfig& config() const { return cfg_; }
  const nn::ParamLayout& layout() const { return layout_; }
  Index size() const { return layout_.size(); }
  // The teacher covers exactly [0, encoder_size()).
  Index encoder_size() const { return encoder_size_; }
  Index text_begin() const { return text_begin_; }
  Index text_end() const { return text_end_; }
  Index log_sigma() const { return log_sigma_; }

  // False for text-encoder slots while the text encoder is frozen.
  bool trainable(const nn::ParamSlot& slot) const;

  std::vector<float> init_params(std::uint64_t seed) const;

  Encoder encoder;
  Predictor predictor;
  ProjectionHead head;
  TextEncoder text;

 private:
  ModelConfig cfg_;
  nn::ParamLayout layout_;
  Index encoder_size_ = 0;
  Index text_begin_ = 0;
  Index text_end_ = 0;
  Index log_sigma_ = -1;
};

}  // namespace fils
