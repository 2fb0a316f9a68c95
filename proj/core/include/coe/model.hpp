#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "coe/coe_layer.hpp"
#include "coe/config.hpp"

namespace coe {

template <typename T>
struct TransformerBlock {
  Parameter<T>* wq = nullptr;
  Parameter<T>* wk = nullptr;
  Parameter<T>* wv = nullptr;
  Parameter<T>* wo = nullptr;
  Parameter<T>* norm_attn = nullptr;
  Parameter<T>* norm_ffn = nullptr;
  CoELayer<T> coe;
};

// Decoder-only pre-norm transformer whose FFN sublayers are chained-expert
// layers. Rotary embeddings on q/k, causal masking, untied output head, no
// biases.
template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& cfg, std::uint64_t seed = 0) : cfg_(cfg) {
    cfg_.validate();
    const int d = cfg_.hidden;
    embed_ = &store_.add("embed", init_normal<T>({cfg_.vocab, d}, seed, "embed"),
                         /*decay=*/false);
    for (int l = 0; l < cfg_.layers; ++l) {
      const std::string p = "layer." + std::to_string(l);
      TransformerBlock<T> block;
      block.wq = &store_.add(p + ".attn.q", init_normal<T>({d, d}, seed, p + ".attn.q"));
      block.wk = &store_.add(p + ".attn.k", init_normal<T>({d, d}, seed, p + ".attn.k"));
      block.wv = &store_.add(p + ".attn.v", init_normal<T>({d, d}, seed, p + ".attn.v"));
      block.wo = &store_.add(p + ".attn.o", init_normal<T>({d, d}, seed, p + ".attn.o"));
      block.norm_attn = &store_.add(p + ".norm1", init_ones<T>({d}), /*decay=*/false);
      block.norm_ffn = &store_.add(p + ".norm2", init_ones<T>({d}), /*decay=*/false);
      block.coe = CoELayer<T>::create(store_, p, cfg_.coe, seed);
      blocks_.push_back(std::move(block));
    }
    final_norm_ = &store_.add("final_norm", init_ones<T>({d}), /*decay=*/false);
    head_ = &store_.add("head", init_normal<T>({d, cfg_.vocab}, seed, "head"));
  }

  // Registered parameters are addressed by pointer; copying would dangle.
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&&) noexcept = default;
  Model& operator=(Model&&) noexcept = default;

  struct Forward {
    Tensor<T> logits;                  // [tokens × vocab]
    std::vector<RoutingTrace> traces;  // one per layer when captured
    Tensor<T> aux_loss;                // defined only with load balancing on
  };

  Forward forward(std::span<const std::int32_t> ids, Tape<T>* tape = nullptr,
                  bool capture_trace = true, InvocationCounter* counter = nullptr) const {
    const auto n = static_cast<std::int64_t>(ids.size());
    if (n < 1) throw UsageError("model: empty token sequence");
    if (n > cfg_.max_seq)
      throw UsageError("model: sequence length " + std::to_string(n) + " exceeds max_seq " +
                       std::to_string(cfg_.max_seq));
    std::vector<std::int64_t> rows(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= cfg_.vocab)
        throw IndexError("model: token id " + std::to_string(ids[i]) + " outside vocab [0," +
                         std::to_string(cfg_.vocab) + ") at position " + std::to_string(i));
      rows[i] = ids[i];
    }

    const int heads = cfg_.heads;
    const auto hd = static_cast<std::int64_t>(cfg_.hidden / heads);
    const T inv_sqrt_hd = T(1) / static_cast<T>(std::sqrt(static_cast<double>(hd)));
    const Tensor<T> mask = causal_mask(n);
    const auto eps = static_cast<T>(cfg_.norm_eps);

    Forward out;
    Tensor<T> x = gather_rows(embed_->tensor, rows, tape);
    for (const auto& block : blocks_) {
      auto a = rmsnorm(x, block.norm_attn->tensor, eps, tape);
      auto q = rope(matmul(a, block.wq->tensor, tape), heads, 0, tape);
      auto k = rope(matmul(a, block.wk->tensor, tape), heads, 0, tape);
      auto v = matmul(a, block.wv->tensor, tape);
      std::vector<Tensor<T>> ctx;
      ctx.reserve(static_cast<std::size_t>(heads));
      for (int h = 0; h < heads; ++h) {
        auto qh = slice_cols(q, h * hd, hd, tape);
        auto kh = slice_cols(k, h * hd, hd, tape);
        auto vh = slice_cols(v, h * hd, hd, tape);
        auto scores = add(scale(matmul_nt(qh, kh, tape), inv_sqrt_hd, tape), mask, tape);
        ctx.push_back(matmul(softmax_rows(scores, tape), vh, tape));
      }
      x = add(x, matmul(concat_cols(ctx, tape), block.wo->tensor, tape), tape);

      auto f = rmsnorm(x, block.norm_ffn->tensor, eps, tape);
      auto ffn = block.coe.forward(f, tape, capture_trace, counter);
      x = add(x, ffn.output, tape);
      if (capture_trace) {
        ffn.trace.layer = static_cast<int>(out.traces.size());
        out.traces.push_back(std::move(ffn.trace));
      }
      if (ffn.aux_loss.defined())
        out.aux_loss =
            out.aux_loss.defined() ? add(out.aux_loss, ffn.aux_loss, tape) : ffn.aux_loss;
    }
    x = rmsnorm(x, final_norm_->tensor, eps, tape);
    out.logits = matmul(x, head_->tensor, tape);
    return out;
  }

  const ModelConfig& config() const { return cfg_; }
  ParameterStore<T>& params() { return store_; }
  const ParameterStore<T>& params() const { return store_; }
  std::vector<TransformerBlock<T>>& blocks() { return blocks_; }

  void watch_parameters(Tape<T>& tape) { store_.watch_all(tape); }
  void zero_grads() { store_.zero_grads(); }

 private:
  static Tensor<T> causal_mask(std::int64_t n) {
    Tensor<T> m({n, n});
    auto p = m.data();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t j = i + 1; j < n; ++j)
        p[static_cast<std::size_t>(i * n + j)] = T(-1e30);
    return m;
  }

  ModelConfig cfg_;
  ParameterStore<T> store_;
  Parameter<T>* embed_ = nullptr;
  std::vector<TransformerBlock<T>> blocks_;
  Parameter<T>* final_norm_ = nullptr;
  Parameter<T>* head_ = nullptr;
};

}  // namespace coe
