#pragma once

#include "grace/numeric.hpp"
#include "grace/quant.hpp"
#include "grace/rng.hpp"
#include "grace/tape.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace grace {

/// Generative description of the synthetic multimodal-ish task. The class of
/// each text position is determined by the mean feature of its designated
/// visual cluster combined with the position's context vector, so the
/// relational layout of the visual tokens genuinely carries label
/// information.
struct TaskSpec {
  int vocab = 32;
  int visual_tokens = 64;
  int clusters = 4;
  int feature_dim = 8;
  int context_dim = 8;
  int positions = 4;
  double cluster_spread = 1.0;
  double token_noise = 0.35;

  Matrix label_visual;             // vocab x feature_dim
  Matrix label_context;            // vocab x context_dim
  std::vector<int> token_cluster;  // fixed partition of the visual tokens

  static TaskSpec make(int vocab, int visual_tokens, int clusters, int feature_dim,
                       int context_dim, int positions, double cluster_spread,
                       double token_noise, Rng& rng);
};

struct Sample {
  Matrix visual;                    // n x feature_dim
  Matrix context;                   // P x context_dim
  std::vector<int> query_cluster;   // P, which cluster each position asks about
  std::vector<int> target;          // P, ground-truth class indices
  std::vector<std::uint8_t> valid;  // P, loss mask
};

/// mask_mode: "all" marks every position valid, "answer_only" only the last.
std::vector<Sample> make_dataset(const TaskSpec& task, int count, Rng& rng,
                                 const std::string& mask_mode = "all");

/// MLP over visual tokens followed by cluster pooling, a combine layer that
/// mixes the pooled visual state with the position context, and a vocabulary
/// head. Weight matrices are optionally fake-quantized (biases stay full
/// precision).
struct ToyModel {
  int hidden = 24;
  int enc_layers = 1;  // token-wise layers; total "layers" = enc_layers + combine
  int vocab = 32;
  int feature_dim = 8;
  int context_dim = 8;
  int hidden_tap = -2;  // -2 = last encoder output feeds RCKA

  bool quantized = false;
  QuantConfig qcfg;

  std::vector<Matrix> enc_w;
  std::vector<RowVector> enc_b;
  Matrix wv, wu;  // combine: hidden x hidden and hidden x context_dim
  RowVector bc;
  Matrix wh;  // vocab x hidden
  RowVector bh;
  std::vector<Vector> thetas;  // one per weight matrix when quantized

  void init(Rng& rng);
  void attach_quantization(const QuantConfig& cfg);

  std::vector<Matrix*> weights();
  std::vector<const Matrix*> weights() const;
  std::vector<RowVector*> biases();
  int tap_encoder_index() const;  // resolved from hidden_tap

  /// Weight i as used in the forward pass (fake-quantized when enabled).
  Matrix effective_weight(size_t i) const;

  struct Forward {
    Matrix logits;              // (B * positions) x vocab
    Matrix tap_all;             // (B * n) x hidden
    std::vector<int> targets;   // stacked
    std::vector<std::uint8_t> valid;
  };
  Forward forward_batch(const TaskSpec& task, const std::vector<const Sample*>& batch) const;

  struct TapeForward {
    Var logits;
    Var tap_all;
    std::vector<Var> weight_leaves;  // flat padded columns when quantized
    std::vector<Var> bias_leaves;
    std::vector<Var> theta_leaves;   // empty when full precision
    std::vector<int> targets;
    std::vector<std::uint8_t> valid;
  };
  TapeForward forward_batch_tape(Tape& t, const TaskSpec& task,
                                 const std::vector<const Sample*>& batch) const;

  /// Applies tape gradients with plain SGD; weight grads arrive in the same
  /// layout the leaves were built with.
  void sgd_step(const Tape& t, const TapeForward& f, double lr_w, double lr_s);
};

/// Mean within-cluster minus mean between-cluster cosine similarity of the
/// rows, given the fixed token partition.
double cluster_similarity_gap(const Matrix& features, const std::vector<int>& token_cluster);

}  // namespace grace
