#include "tinyvlm/train.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

constexpr double kRelu6Max = 6.0;

void require_same_shape(const Matrix& a, const Matrix& b, const char* what) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw Error(ErrorCode::ShapeMismatch, std::string(what) + ": shape mismatch");
}

void check_tau(double tau) {
    if (!(tau > 0.0) || !std::isfinite(tau)) throw Error(ErrorCode::BadTemperature, "temperature must be positive");
}

double log_sum_exp(std::span<const double> v) {
    const double m = *std::max_element(v.begin(), v.end());
    double s = 0.0;
    for (double x : v) s += std::exp(x - m);
    return m + std::log(s);
}

// Row-wise L2 normalization with the backward map.
struct Normalized {
    Matrix y;
    std::vector<double> norms;
};

Normalized normalize_forward(const Matrix& x) {
    Normalized n{Matrix(x.rows(), x.cols()), std::vector<double>(x.rows())};
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const double len = l2_norm(x.row(r));
        // NaN passes through so the training loop can report it as a non-finite loss.
        if (len <= kNormEpsilon) throw Error(ErrorCode::ZeroNorm, "row " + std::to_string(r) + " has zero norm");
        n.norms[r] = len;
        for (std::size_t c = 0; c < x.cols(); ++c) n.y(r, c) = x(r, c) / len;
    }
    return n;
}

Matrix normalize_backward(const Normalized& n, const Matrix& dy) {
    Matrix dx(dy.rows(), dy.cols());
    for (std::size_t r = 0; r < dy.rows(); ++r) {
        const double proj = dot(dy.row(r), n.y.row(r));
        for (std::size_t c = 0; c < dy.cols(); ++c) dx(r, c) = (dy(r, c) - proj * n.y(r, c)) / n.norms[r];
    }
    return dx;
}

void add_into(Matrix& acc, const Matrix& g, double w = 1.0) {
    for (std::size_t i = 0; i < acc.data().size(); ++i) acc.data()[i] += w * g.data()[i];
}

void add_into_prefix(Matrix& acc, const Matrix& g, double w) {
    for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) acc(r, c) += w * g(r, c);
}

double relu6(double x) { return std::clamp(x, 0.0, kRelu6Max); }

struct MlpCache {
    Matrix pre;
    Matrix hidden;
    Matrix out;
};

MlpCache mlp_forward(const Mlp& m, const Matrix& x) {
    if (x.cols() != m.in_dim())
        throw Error(ErrorCode::ShapeMismatch, "MLP expects " + std::to_string(m.in_dim()) + " inputs, got " +
                                                  std::to_string(x.cols()));
    MlpCache c;
    c.pre = matmul_bt(x, m.w1);
    for (std::size_t r = 0; r < c.pre.rows(); ++r)
        for (std::size_t j = 0; j < c.pre.cols(); ++j) c.pre(r, j) += m.b1(0, j);
    c.hidden = c.pre;
    for (auto& v : c.hidden.data()) v = relu6(v);
    c.out = matmul_bt(c.hidden, m.w2);
    for (std::size_t r = 0; r < c.out.rows(); ++r)
        for (std::size_t j = 0; j < c.out.cols(); ++j) c.out(r, j) += m.b2(0, j);
    return c;
}

Matrix column_sums(const Matrix& a) {
    Matrix s(1, a.cols());
    for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t c = 0; c < a.cols(); ++c) s(0, c) += a(r, c);
    return s;
}

// Gradients in parameter order (w1, b1, w2, b2).
std::vector<Matrix> mlp_backward(const Mlp& m, const Matrix& x, const MlpCache& c, const Matrix& dout) {
    Matrix dw2 = matmul(transpose(dout), c.hidden);
    Matrix db2 = column_sums(dout);
    Matrix dpre = matmul(dout, m.w2);
    for (std::size_t i = 0; i < dpre.data().size(); ++i) {
        const double p = c.pre.data()[i];
        if (!(p > 0.0 && p < kRelu6Max)) dpre.data()[i] = 0.0;
    }
    Matrix dw1 = matmul(transpose(dpre), x);
    Matrix db1 = column_sums(dpre);
    return {std::move(dw1), std::move(db1), std::move(dw2), std::move(db2)};
}

Matrix random_matrix(std::size_t rows, std::size_t cols, double sd, std::mt19937_64& rng) {
    std::normal_distribution<double> d(0.0, sd);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = d(rng);
    return m;
}

std::vector<float> to_floats(const Matrix& m) { return {m.data().begin(), m.data().end()}; }

}  // namespace

void MatryoshkaConfig::validate() const {
    if (dims.empty()) throw Error(ErrorCode::InvalidArgument, "dimension ladder is empty");
    if (weights.size() != dims.size()) throw Error(ErrorCode::InvalidArgument, "one weight per ladder dimension");
    for (std::size_t i = 0; i < dims.size(); ++i) {
        if (dims[i] == 0 || (i > 0 && dims[i] <= dims[i - 1]))
            throw Error(ErrorCode::InvalidArgument, "dimension ladder must be strictly ascending and positive");
        if (!(weights[i] > 0.0)) throw Error(ErrorCode::InvalidArgument, "ladder weights must be positive");
    }
    check_tau(tau);
    if (teacher_dim == 0) throw Error(ErrorCode::InvalidArgument, "teacher dimension must be positive");
}

MatryoshkaConfig MatryoshkaConfig::with_dims(std::vector<std::size_t> dims) {
    MatryoshkaConfig c;
    c.weights.assign(dims.size(), dims.empty() ? 0.0 : 1.0 / static_cast<double>(dims.size()));
    c.dims = std::move(dims);
    return c;
}

double infonce(const Matrix& img, const Matrix& txt, double tau) { return infonce_grad(img, txt, tau).value; }

LossGrad infonce_grad(const Matrix& img, const Matrix& txt, double tau) {
    check_tau(tau);
    require_same_shape(img, txt, "infonce");
    const std::size_t n = img.rows();
    if (n == 0) throw Error(ErrorCode::EmptyInput, "infonce needs at least one pair");
    Matrix s = scale(matmul_bt(img, txt), 1.0 / tau);
    const Matrix st = transpose(s);
    const Matrix pr = softmax_rows(s);
    const Matrix pc = transpose(softmax_rows(st));
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) loss += (log_sum_exp(s.row(i)) - s(i, i)) + (log_sum_exp(st.row(i)) - s(i, i));
    const double inv = 1.0 / (2.0 * static_cast<double>(n));
    Matrix g(n, n);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) g(i, j) = inv * (pr(i, j) + pc(i, j) - (i == j ? 2.0 : 0.0));
    LossGrad out;
    out.value = loss * inv;
    out.grads.push_back(scale(matmul(g, txt), 1.0 / tau));
    out.grads.push_back(scale(matmul(transpose(g), img), 1.0 / tau));
    return out;
}

LossGrad infonce_raw_grad(const Matrix& img, const Matrix& txt, double tau) {
    const auto ni = normalize_forward(img);
    const auto nt = normalize_forward(txt);
    auto lg = infonce_grad(ni.y, nt.y, tau);
    lg.grads[0] = normalize_backward(ni, lg.grads[0]);
    lg.grads[1] = normalize_backward(nt, lg.grads[1]);
    return lg;
}

double projection_mse(const Matrix& student, const Matrix& teacher, const Matrix& w_proj) {
    return projection_mse_grad(student, teacher, w_proj).value;
}

LossGrad projection_mse_grad(const Matrix& student, const Matrix& teacher, const Matrix& w_proj) {
    if (w_proj.cols() != student.cols() || w_proj.rows() != teacher.cols() || student.rows() != teacher.rows())
        throw Error(ErrorCode::ShapeMismatch, "projection expects student (N x d), teacher (N x d_T), W (d_T x d)");
    const std::size_t n = student.rows();
    if (n == 0) throw Error(ErrorCode::EmptyInput, "empty batch");
    const Matrix r = sub(matmul_bt(student, w_proj), teacher);
    double sq = 0.0;
    for (double v : r.data()) sq += v * v;
    const double k = 2.0 / static_cast<double>(n);
    LossGrad out;
    out.value = sq / static_cast<double>(n);
    out.grads.push_back(scale(matmul(r, w_proj), k));
    out.grads.push_back(scale(matmul(transpose(r), student), k));
    return out;
}

double embedding_distill(const Matrix& s_img, const Matrix& t_img, const Matrix& s_txt, const Matrix& t_txt,
                         const Matrix& w_proj) {
    return projection_mse(s_img, t_img, w_proj) + projection_mse(s_txt, t_txt, w_proj);
}

LossGrad embedding_distill_grad(const Matrix& s_img, const Matrix& t_img, const Matrix& s_txt, const Matrix& t_txt,
                                const Matrix& w_proj) {
    auto a = projection_mse_grad(s_img, t_img, w_proj);
    auto b = projection_mse_grad(s_txt, t_txt, w_proj);
    LossGrad out;
    out.value = a.value + b.value;
    out.grads.push_back(std::move(a.grads[0]));
    out.grads.push_back(std::move(b.grads[0]));
    out.grads.push_back(add(a.grads[1], b.grads[1]));
    return out;
}

double matryoshka_loss(const Matrix& img, const Matrix& txt, const MatryoshkaConfig& cfg) {
    return matryoshka_loss_grad(img, txt, cfg).value;
}

LossGrad matryoshka_loss_grad(const Matrix& img, const Matrix& txt, const MatryoshkaConfig& cfg) {
    cfg.validate();
    require_same_shape(img, txt, "matryoshka_loss");
    if (cfg.d_max() > img.cols())
        throw Error(ErrorCode::DimensionTooLarge, "ladder dimension " + std::to_string(cfg.d_max()) +
                                                      " exceeds embedding width " + std::to_string(img.cols()));
    LossGrad out;
    out.grads = {Matrix(img.rows(), img.cols()), Matrix(txt.rows(), txt.cols())};
    for (std::size_t k = 0; k < cfg.dims.size(); ++k) {
        const std::size_t d = cfg.dims[k];
        const auto lg = infonce_raw_grad(img.left_cols(d), txt.left_cols(d), cfg.tau);
        out.value += cfg.weights[k] * lg.value;
        add_into_prefix(out.grads[0], lg.grads[0], cfg.weights[k]);
        add_into_prefix(out.grads[1], lg.grads[1], cfg.weights[k]);
    }
    return out;
}

double enhanced_distill(const Matrix& z_s, const Matrix& z_t, const Matrix& w_proj, double lambda_mse,
                        double lambda_cos) {
    return enhanced_distill_grad(z_s, z_t, w_proj, lambda_mse, lambda_cos).value;
}

LossGrad enhanced_distill_grad(const Matrix& z_s, const Matrix& z_t, const Matrix& w_proj, double lambda_mse,
                               double lambda_cos) {
    auto mse = projection_mse_grad(z_s, z_t, w_proj);
    LossGrad out;
    out.value = lambda_mse * mse.value;
    out.grads = {scale(mse.grads[0], lambda_mse), Matrix(z_t.rows(), z_t.cols()), scale(mse.grads[1], lambda_mse)};
    // d/dz_t of the MSE part: -2/N r.
    const Matrix r = sub(matmul_bt(z_s, w_proj), z_t);
    add_into(out.grads[1], r, -2.0 * lambda_mse / static_cast<double>(z_s.rows()));
    if (lambda_cos != 0.0) {
        require_same_shape(z_s, z_t, "enhanced_distill cosine term");
        const double inv_n = 1.0 / static_cast<double>(z_s.rows());
        for (std::size_t i = 0; i < z_s.rows(); ++i) {
            const auto a = z_s.row(i);
            const auto b = z_t.row(i);
            const double na = l2_norm(a), nb = l2_norm(b);
            if (!(na > kNormEpsilon) || !(nb > kNormEpsilon))
                throw Error(ErrorCode::ZeroNorm, "enhanced_distill row " + std::to_string(i) + " has zero norm");
            const double c = dot(a, b) / (na * nb);
            out.value += lambda_cos * (1.0 - c) * inv_n;
            for (std::size_t j = 0; j < a.size(); ++j) {
                const double dca = b[j] / (na * nb) - c * a[j] / (na * na);
                const double dcb = a[j] / (na * nb) - c * b[j] / (nb * nb);
                out.grads[0](i, j) -= lambda_cos * inv_n * dca;
                out.grads[1](i, j) -= lambda_cos * inv_n * dcb;
            }
        }
    }
    return out;
}

Mlp Mlp::random(std::size_t in, std::size_t hidden, std::size_t out, std::mt19937_64& rng) {
    Mlp m;
    m.w1 = random_matrix(hidden, in, std::sqrt(2.0 / static_cast<double>(in)), rng);
    m.b1 = Matrix(1, hidden, 0.0);
    m.w2 = random_matrix(out, hidden, std::sqrt(1.0 / static_cast<double>(hidden)), rng);
    m.b2 = Matrix(1, out, 0.0);
    return m;
}

Matrix Mlp::forward(const Matrix& x) const { return mlp_forward(*this, x).out; }

LayerGraph Mlp::to_graph() const {
    LayerGraph g;
    g.input_shape = {1, 1, in_dim()};
    g.layers.push_back(make_linear(in_dim(), w1.rows(), to_floats(w1), to_floats(b1)));
    g.layers.push_back(make_relu6());
    g.layers.push_back(make_linear(w1.rows(), out_dim(), to_floats(w2), to_floats(b2)));
    return g;
}

StudentModel StudentModel::random(std::size_t image_dim, std::size_t hidden, const MatryoshkaConfig& cfg,
                                  std::mt19937_64& rng) {
    cfg.validate();
    StudentModel s;
    s.vision = Mlp::random(image_dim, hidden, cfg.d_max(), rng);
    s.text = Mlp::random(cfg.teacher_dim, hidden, cfg.d_max(), rng);
    s.w_proj = random_matrix(cfg.teacher_dim, cfg.d_max(), std::sqrt(1.0 / static_cast<double>(cfg.d_max())), rng);
    return s;
}

std::vector<Matrix*> StudentModel::parameters() {
    return {&vision.w1, &vision.b1, &vision.w2, &vision.b2, &text.w1, &text.b1, &text.w2, &text.b2, &w_proj};
}

std::vector<const Matrix*> StudentModel::parameters() const {
    return {&vision.w1, &vision.b1, &vision.w2, &vision.b2, &text.w1, &text.b1, &text.w2, &text.b2, &w_proj};
}

std::size_t StudentModel::parameter_count() const {
    std::size_t n = 0;
    for (const auto* p : parameters()) n += p->data().size();
    return n;
}

LossBreakdown total_loss(const BatchPair& batch, const StudentModel& model, const MatryoshkaConfig& cfg) {
    std::vector<Matrix> unused;
    return total_loss_grad(batch, model, cfg, unused);
}

LossBreakdown total_loss_grad(const BatchPair& batch, const StudentModel& model, const MatryoshkaConfig& cfg,
                              std::vector<Matrix>& grads) {
    cfg.validate();
    if (batch.size() < 2) throw Error(ErrorCode::InvalidArgument, "total loss needs a batch of at least 2 pairs");
    if (batch.teacher_images.rows() != batch.size() || batch.texts.rows() != batch.size())
        throw Error(ErrorCode::ShapeMismatch, "batch views differ in length");
    if (model.vision.out_dim() != cfg.d_max() || model.text.out_dim() != cfg.d_max() ||
        model.w_proj.rows() != cfg.teacher_dim || model.w_proj.cols() != cfg.d_max())
        throw Error(ErrorCode::ShapeMismatch, "student model does not match the configuration");

    const auto vis = mlp_forward(model.vision, batch.images);
    const auto txt = mlp_forward(model.text, batch.texts);
    const auto con = infonce_raw_grad(vis.out, txt.out, cfg.tau);
    const auto emb = embedding_distill_grad(vis.out, batch.teacher_images, txt.out, batch.texts, model.w_proj);
    const auto mat = matryoshka_loss_grad(vis.out, txt.out, cfg);

    LossBreakdown lb;
    lb.contrastive = con.value;
    lb.emb = emb.value;
    lb.mat = mat.value;
    lb.total = lb.contrastive + cfg.alpha_emb * lb.emb + cfg.alpha_mat * lb.mat;

    Matrix d_img = con.grads[0];
    add_into(d_img, emb.grads[0], cfg.alpha_emb);
    add_into(d_img, mat.grads[0], cfg.alpha_mat);
    Matrix d_txt = con.grads[1];
    add_into(d_txt, emb.grads[1], cfg.alpha_emb);
    add_into(d_txt, mat.grads[1], cfg.alpha_mat);

    grads = mlp_backward(model.vision, batch.images, vis, d_img);
    auto tg = mlp_backward(model.text, batch.texts, txt, d_txt);
    for (auto& g : tg) grads.push_back(std::move(g));
    grads.push_back(scale(emb.grads[2], cfg.alpha_emb));
    return lb;
}

SyntheticTeacher SyntheticTeacher::create(std::size_t teacher_dim, std::uint64_t seed, std::size_t latent_dim,
                                          std::size_t image_dim, double noise) {
    if (teacher_dim == 0 || latent_dim == 0 || image_dim == 0)
        throw Error(ErrorCode::InvalidArgument, "teacher dimensions must be positive");
    std::mt19937_64 rng(seed);
    SyntheticTeacher t;
    t.latent_dim = latent_dim;
    t.image_dim = image_dim;
    t.noise = noise;
    const double sd = 1.0 / std::sqrt(static_cast<double>(latent_dim));
    t.to_teacher = random_matrix(teacher_dim, latent_dim, sd, rng);
    t.to_image = random_matrix(image_dim, latent_dim, sd, rng);
    return t;
}

BatchPair SyntheticTeacher::sample(std::size_t n, std::mt19937_64& rng) const {
    std::normal_distribution<double> nd;
    Matrix z(n, latent_dim);
    for (auto& v : z.data()) v = nd(rng);
    auto view = [&](const Matrix& map) {
        Matrix x = matmul_bt(z, map);
        for (auto& v : x.data()) v += noise * nd(rng);
        return x;
    };
    BatchPair b;
    b.images = view(to_image);
    b.teacher_images = normalize_rows(view(to_teacher));
    b.texts = normalize_rows(view(to_teacher));
    return b;
}

double learning_rate(std::size_t step, std::size_t total_steps, const TrainOptions& opt) {
    const std::size_t warmup = std::min(opt.warmup_steps, total_steps);
    if (step < warmup) return opt.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
    const double span = static_cast<double>(std::max<std::size_t>(1, total_steps - warmup));
    const double progress = std::min(1.0, static_cast<double>(step - warmup) / span);
    return opt.lr * 0.5 * (1.0 + std::cos(std::acos(-1.0) * progress));
}

AdamW::AdamW(const std::vector<Matrix*>& params, double beta1, double beta2, double eps)
    : beta1_(beta1), beta2_(beta2), eps_(eps) {
    for (const auto* p : params) {
        m_.emplace_back(p->rows(), p->cols());
        v_.emplace_back(p->rows(), p->cols());
    }
}

void AdamW::step(const std::vector<Matrix*>& params, const std::vector<Matrix>& grads, double lr,
                 double weight_decay) {
    if (params.size() != m_.size() || grads.size() != m_.size())
        throw Error(ErrorCode::ShapeMismatch, "optimizer parameter list changed");
    ++t_;
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& w = params[k]->data();
        const auto& g = grads[k].data();
        auto& m = m_[k].data();
        auto& v = v_[k].data();
        const bool decay = params[k]->rows() > 1;
        for (std::size_t i = 0; i < w.size(); ++i) {
            m[i] = beta1_ * m[i] + (1 - beta1_) * g[i];
            v[i] = beta2_ * v[i] + (1 - beta2_) * g[i] * g[i];
            const double update = (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            w[i] -= lr * (update + (decay ? weight_decay * w[i] : 0.0));
        }
    }
}

namespace {

Matrix gather_rows(const Matrix& m, std::span<const std::size_t> idx) {
    Matrix out(idx.size(), m.cols());
    for (std::size_t r = 0; r < idx.size(); ++r) std::copy(m.row(idx[r]).begin(), m.row(idx[r]).end(), out.row(r).begin());
    return out;
}

}  // namespace

TrainResult train_toy(const BatchPair& dataset, StudentModel model, const MatryoshkaConfig& cfg,
                      const TrainOptions& opt) {
    cfg.validate();
    const std::size_t n = dataset.size();
    if (opt.batch < 2) throw Error(ErrorCode::InvalidArgument, "batch size must be at least 2");
    if (n < 2) throw Error(ErrorCode::EmptyInput, "training needs at least 2 pairs");
    if (opt.epochs == 0) throw Error(ErrorCode::InvalidArgument, "epochs must be positive");
    const std::size_t batch = std::min(opt.batch, n);
    // A trailing batch of one pair has no negatives; fold it into the previous batch.
    std::size_t per_epoch = n / batch;
    const std::size_t total_steps = per_epoch * opt.epochs;

    std::mt19937_64 rng(opt.seed);
    AdamW adam(model.parameters());
    TrainResult result;
    std::vector<std::size_t> order(n);
    std::vector<Matrix> grads;
    std::size_t step = 0;
    for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), 0);
        std::shuffle(order.begin(), order.end(), rng);
        LossBreakdown mean;
        for (std::size_t b = 0; b < per_epoch; ++b) {
            const std::size_t lo = b * batch;
            const std::size_t hi = b + 1 == per_epoch ? n : lo + batch;
            const auto idx = std::span<const std::size_t>(order).subspan(lo, hi - lo);
            const BatchPair bp{gather_rows(dataset.images, idx), gather_rows(dataset.teacher_images, idx),
                               gather_rows(dataset.texts, idx)};
            const auto lb = total_loss_grad(bp, model, cfg, grads);
            if (!std::isfinite(lb.total) || !std::isfinite(lb.contrastive) || !std::isfinite(lb.emb) ||
                !std::isfinite(lb.mat)) {
                std::ostringstream os;
                os << "non-finite loss at epoch " << epoch << " step " << step << ": contrastive=" << lb.contrastive
                   << " emb=" << lb.emb << " mat=" << lb.mat;
                throw Error(ErrorCode::NonFiniteLoss, os.str());
            }
            adam.step(model.parameters(), grads, learning_rate(step, total_steps, opt), opt.weight_decay);
            ++step;
            mean.total += lb.total / static_cast<double>(per_epoch);
            mean.contrastive += lb.contrastive / static_cast<double>(per_epoch);
            mean.emb += lb.emb / static_cast<double>(per_epoch);
            mean.mat += lb.mat / static_cast<double>(per_epoch);
        }
        result.curve.push_back(mean);
    }
    result.steps = step;
    result.model = std::move(model);
    return result;
}

double retrieval_accuracy(const Matrix& img, const Matrix& txt, std::size_t d) {
    require_same_shape(img, txt, "retrieval_accuracy");
    if (d == 0 || d > img.cols()) throw Error(ErrorCode::DimensionTooLarge, "retrieval dimension out of range");
    if (img.rows() == 0) throw Error(ErrorCode::EmptyInput, "no pairs to retrieve");
    const Matrix a = normalize_forward(img.left_cols(d)).y;
    const Matrix b = normalize_forward(txt.left_cols(d)).y;
    const Matrix s = matmul_bt(a, b);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < s.rows(); ++i) {
        const auto row = s.row(i);
        const auto best = static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin());
        hits += best == i;
    }
    return static_cast<double>(hits) / static_cast<double>(s.rows());
}

double gradient_relative_error(double analytic, double numeric, double floor) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

using LossFn = std::function<double(const std::vector<Matrix>&)>;

GradCheckEntry check_gradients(std::string name, std::vector<Matrix> inputs, const std::vector<Matrix>& analytic,
                               const LossFn& f, double h, double tol) {
    GradCheckEntry e;
    e.name = std::move(name);
    for (std::size_t k = 0; k < inputs.size(); ++k) {
        auto& data = inputs[k].data();
        for (std::size_t i = 0; i < data.size(); ++i) {
            const double keep = data[i];
            data[i] = keep + h;
            const double up = f(inputs);
            data[i] = keep - h;
            const double down = f(inputs);
            data[i] = keep;
            const double numeric = (up - down) / (2 * h);
            e.max_rel_error = std::max(e.max_rel_error, gradient_relative_error(analytic[k].data()[i], numeric));
            ++e.coordinates;
        }
    }
    e.passed = e.max_rel_error < tol;
    return e;
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_suite(std::uint64_t seed, double step, double tol) {
    std::mt19937_64 rng(seed);
    std::vector<GradCheckEntry> out;
    const double tau = 0.07;

    {
        const Matrix a = random_matrix(4, 6, 1.0, rng), b = random_matrix(4, 6, 1.0, rng);
        const auto lg = infonce_raw_grad(a, b, tau);
        out.push_back(check_gradients("infonce", {a, b}, lg.grads,
                                      [&](const std::vector<Matrix>& m) {
                                          return infonce(normalize_rows(m[0]), normalize_rows(m[1]), tau);
                                      },
                                      step, tol));
    }
    {
        const Matrix si = random_matrix(4, 6, 1.0, rng), st = random_matrix(4, 6, 1.0, rng);
        const Matrix ti = random_matrix(4, 5, 1.0, rng), tt = random_matrix(4, 5, 1.0, rng);
        const Matrix w = random_matrix(5, 6, 0.5, rng);
        const auto lg = embedding_distill_grad(si, ti, st, tt, w);
        out.push_back(check_gradients("embedding_distill", {si, st, w}, lg.grads,
                                      [&](const std::vector<Matrix>& m) {
                                          return embedding_distill(m[0], ti, m[1], tt, m[2]);
                                      },
                                      step, tol));
    }
    {
        auto cfg = MatryoshkaConfig::with_dims({2, 4, 8});
        const Matrix a = random_matrix(4, 8, 1.0, rng), b = random_matrix(4, 8, 1.0, rng);
        const auto lg = matryoshka_loss_grad(a, b, cfg);
        out.push_back(check_gradients("matryoshka", {a, b}, lg.grads,
                                      [&](const std::vector<Matrix>& m) { return matryoshka_loss(m[0], m[1], cfg); },
                                      step, tol));
    }
    {
        const Matrix zs = random_matrix(4, 5, 1.0, rng), zt = random_matrix(4, 5, 1.0, rng);
        const Matrix w = random_matrix(5, 5, 0.5, rng);
        const auto lg = enhanced_distill_grad(zs, zt, w, 0.7, 0.3);
        out.push_back(check_gradients("enhanced_distill", {zs, zt, w}, lg.grads,
                                      [&](const std::vector<Matrix>& m) {
                                          return enhanced_distill(m[0], m[1], m[2], 0.7, 0.3);
                                      },
                                      step, tol));
    }
    {
        auto cfg = MatryoshkaConfig::with_dims({2, 4, 6});
        cfg.teacher_dim = 5;
        StudentModel model = StudentModel::random(3, 4, cfg, rng);
        // Positive first-layer biases keep most hidden units away from the ReLU6 kinks.
        for (auto* b : {&model.vision.b1, &model.text.b1})
            for (auto& v : b->data()) v = 1.0;
        const auto teacher = SyntheticTeacher::create(cfg.teacher_dim, seed + 1, 4, 3, 0.1);
        const BatchPair batch = teacher.sample(4, rng);
        std::vector<Matrix> grads;
        total_loss_grad(batch, model, cfg, grads);
        std::vector<Matrix> params;
        for (const auto* p : std::as_const(model).parameters()) params.push_back(*p);
        out.push_back(check_gradients("total", params, grads,
                                      [&](const std::vector<Matrix>& m) {
                                          StudentModel probe = model;
                                          auto ptrs = probe.parameters();
                                          for (std::size_t k = 0; k < ptrs.size(); ++k) *ptrs[k] = m[k];
                                          return total_loss(batch, probe, cfg).total;
                                      },
                                      step, tol));
    }
    return out;
}

}  // namespace tinyvlm
