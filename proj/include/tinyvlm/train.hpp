#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "tinyvlm/encoder.hpp"
#include "tinyvlm/tensor.hpp"

namespace tinyvlm {

struct MatryoshkaConfig {
    std::vector<std::size_t> dims{16, 32, 64, 128, 256};
    std::vector<double> weights{0.2, 0.2, 0.2, 0.2, 0.2};
    double tau = 0.07;
    double alpha_emb = 1.0;
    double alpha_mat = 0.5;
    std::size_t teacher_dim = 512;

    std::size_t d_max() const { return dims.empty() ? 0 : dims.back(); }
    // Throws InvalidArgument / BadTemperature.
    void validate() const;
    // Ladder with uniform weights 1/|dims|.
    static MatryoshkaConfig with_dims(std::vector<std::size_t> dims);
};

// Loss value with gradients for each input, in argument order.
struct LossGrad {
    double value = 0.0;
    std::vector<Matrix> grads;
};

// Symmetric InfoNCE over already L2-normalized rows: 1/(2N) times the sum of the
// image->text and text->image cross-entropies of S = img txt^T / tau.
double infonce(const Matrix& img, const Matrix& txt, double tau);
LossGrad infonce_grad(const Matrix& img, const Matrix& txt, double tau);
// Same loss applied to raw rows after L2 normalization; gradients are w.r.t. the raw rows.
LossGrad infonce_raw_grad(const Matrix& img, const Matrix& txt, double tau);

// Mean over the batch of ||W s_i - t_i||^2 for one side. Gradients: (student, W).
double projection_mse(const Matrix& student, const Matrix& teacher, const Matrix& w_proj);
LossGrad projection_mse_grad(const Matrix& student, const Matrix& teacher, const Matrix& w_proj);

// Image side plus text side of the projected MSE. Gradients: (s_img, s_txt, W).
double embedding_distill(const Matrix& s_img, const Matrix& t_img, const Matrix& s_txt, const Matrix& t_txt,
                         const Matrix& w_proj);
LossGrad embedding_distill_grad(const Matrix& s_img, const Matrix& t_img, const Matrix& s_txt, const Matrix& t_txt,
                                const Matrix& w_proj);

// Weighted InfoNCE over every ladder prefix, each prefix re-normalized. Inputs are raw rows.
double matryoshka_loss(const Matrix& img, const Matrix& txt, const MatryoshkaConfig& cfg);
LossGrad matryoshka_loss_grad(const Matrix& img, const Matrix& txt, const MatryoshkaConfig& cfg);

// Batch mean of lambda_mse ||W z_s - z_t||^2 + lambda_cos (1 - cos(z_s, z_t)).
// The cosine compares the unprojected student with the teacher, so both must
// share a width. Gradients: (z_s, z_t, W).
double enhanced_distill(const Matrix& z_s, const Matrix& z_t, const Matrix& w_proj, double lambda_mse,
                        double lambda_cos);
LossGrad enhanced_distill_grad(const Matrix& z_s, const Matrix& z_t, const Matrix& w_proj, double lambda_mse,
                               double lambda_cos);

// Two-layer perceptron: Linear -> ReLU6 -> Linear, rows are samples.
struct Mlp {
    Matrix w1;  // hidden x in
    Matrix b1;  // 1 x hidden
    Matrix w2;  // out x hidden
    Matrix b2;  // 1 x out

    static Mlp random(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng);
    std::size_t in_dim() const noexcept { return w1.cols(); }
    std::size_t out_dim() const noexcept { return w2.rows(); }
    Matrix forward(const Matrix& x) const;
    // Same network as a TVG1-serializable graph over a 1x1xin input.
    LayerGraph to_graph() const;
    friend bool operator==(const Mlp&, const Mlp&) = default;
};

struct StudentModel {
    Mlp vision;
    Mlp text;
    Matrix w_proj;  // teacher_dim x d_max

    static StudentModel random(std::size_t image_dim, std::size_t hidden, const MatryoshkaConfig& cfg,
                               std::mt19937_64& rng);
    std::vector<Matrix*> parameters();
    std::vector<const Matrix*> parameters() const;
    std::size_t parameter_count() const;
    friend bool operator==(const StudentModel&, const StudentModel&) = default;
};

// One training batch: image features, the frozen teacher's image embeddings, and
// the teacher text embeddings that the text tower consumes.
struct BatchPair {
    Matrix images;
    Matrix teacher_images;
    Matrix texts;
    std::size_t size() const noexcept { return images.rows(); }
};

struct LossBreakdown {
    double total = 0.0;
    double contrastive = 0.0;
    double emb = 0.0;
    double mat = 0.0;
};

LossBreakdown total_loss(const BatchPair& batch, const StudentModel& model, const MatryoshkaConfig& cfg);
// Loss plus gradients for every entry of model.parameters().
LossBreakdown total_loss_grad(const BatchPair& batch, const StudentModel& model, const MatryoshkaConfig& cfg,
                              std::vector<Matrix>& grads);

// Frozen synthetic teacher: latent factors z map to unit-norm d_T embeddings via
// one shared random matrix, with separate noise for the image and text views.
// Student image features are another fixed random view of z.
struct SyntheticTeacher {
    std::size_t latent_dim = 16;
    std::size_t image_dim = 32;
    double noise = 0.1;
    Matrix to_teacher;  // d_T x latent
    Matrix to_image;    // image_dim x latent

    static SyntheticTeacher create(std::size_t teacher_dim, std::uint64_t seed, std::size_t latent_dim = 16,
                                   std::size_t image_dim = 32, double noise = 0.1);
    BatchPair sample(std::size_t n, std::mt19937_64& rng) const;
};

struct TrainOptions {
    std::size_t epochs = 50;
    std::size_t batch = 16;
    double lr = 1e-3;
    double weight_decay = 0.01;
    std::size_t warmup_steps = 10;
    std::uint64_t seed = 42;
};

// Linear warmup to lr, then cosine decay towards 0 at total_steps.
double learning_rate(std::size_t step, std::size_t total_steps, const TrainOptions& opt);

class AdamW {
public:
    explicit AdamW(const std::vector<Matrix*>& params, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    // Decoupled weight decay is applied to every parameter with more than one row.
    void step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads, double lr, double weight_decay);

private:
    double beta1_, beta2_, eps_;
    std::size_t t_ = 0;
    std::vector<Matrix> m_, v_;
};

struct TrainResult {
    StudentModel model;
    std::vector<LossBreakdown> curve;  // mean of step losses per epoch
    std::size_t steps = 0;
};

// Shuffled mini-batches per epoch; each step evaluates the three losses on the
// batch and applies one AdamW update. Throws NonFiniteLoss with the epoch, step
// and loss terms when any term is not finite.
TrainResult train_toy(const BatchPair& dataset, StudentModel model, const MatryoshkaConfig& cfg,
                      const TrainOptions& opt);

// Fraction of images whose most similar text (cosine over the first d
// coordinates) is their own pair.
double retrieval_accuracy(const Matrix& img, const Matrix& txt, std::size_t d);

// Finite-difference verification of every analytic gradient.
struct GradCheckEntry {
    std::string name;
    std::size_t coordinates = 0;
    double max_rel_error = 0.0;
    bool passed = false;
};

// |a - n| / max(|a|, |n|, floor); the floor keeps coordinates whose true
// gradient is zero from dividing rounding noise by zero.
double gradient_relative_error(double analytic, double numeric, double floor = 1e-6);

// Central differences with the given step over each loss on random micro-models.
std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, double step = 1e-5, double tolerance = 1e-4);

}  // namespace tinyvlm
