#include "tinyvlm/compress.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <random>
#include <string>

#include "tinyvlm/bytes.hpp"
#include "tinyvlm/error.hpp"

namespace tinyvlm {

namespace {

constexpr std::string_view kFactorMagic = "TVC1";
constexpr std::uint16_t kFactorVersion = 1;
constexpr std::size_t kMaxSeedings = 4;  // first attempt plus 3 retries
constexpr double kAttentionEpsilon = 1e-9;

double squared_distance(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return s;
}

Matrix plus_plus_seed(const Matrix& x, std::size_t k, std::mt19937_64& rng) {
    const std::size_t n = x.rows();
    Matrix centroids(k, x.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
    for (std::size_t c = 0; c < k; ++c) {
        std::copy(x.row(pick).begin(), x.row(pick).end(), centroids.row(c).begin());
        for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], squared_distance(x.row(i), centroids.row(c)));
        if (c + 1 == k) break;
        const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
        if (total > 0.0) {
            std::discrete_distribution<std::size_t> dist(d2.begin(), d2.end());
            pick = dist(rng);
        } else {
            pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
        }
    }
    return centroids;
}

std::size_t nearest(std::span<const double> row, const Matrix& centroids) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d = squared_distance(row, centroids.row(c));
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    return best;
}

// Sum of q_j k_j over the feature-mapped rows.
double phi_dot(std::span<const double> q, std::span<const double> k) {
    double s = 0.0;
    for (std::size_t j = 0; j < q.size(); ++j) s += elu1(q[j]) * elu1(k[j]);
    return s;
}

void check_attention_inputs(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (q.rows() == 0) throw Error(ErrorCode::EmptyInput, "attention needs at least one row");
    if (q.cols() != k.cols() || q.rows() != k.rows() || k.rows() != v.rows())
        throw Error(ErrorCode::ShapeMismatch, "Q, K and V shapes disagree");
}

void check_square(const Matrix& m, std::size_t d, const char* name) {
    if (m.rows() != d || m.cols() != d)
        throw Error(ErrorCode::ShapeMismatch, std::string(name) + " must be " + std::to_string(d) + "x" +
                                                  std::to_string(d));
}

Matrix random_square(std::size_t d, std::mt19937_64& rng) {
    std::normal_distribution<double> nd(0.0, 1.0 / std::sqrt(static_cast<double>(d)));
    Matrix m(d, d);
    for (auto& x : m.data()) x = nd(rng);
    return m;
}

}  // namespace

KMeansResult kmeans(const Matrix& x, std::size_t clusters, std::uint64_t seed, std::size_t iterations) {
    if (clusters == 0 || clusters > x.rows())
        throw Error(ErrorCode::InvalidArgument, "need 1 <= clusters <= rows, got " + std::to_string(clusters) +
                                                    " clusters for " + std::to_string(x.rows()) + " rows");
    std::mt19937_64 rng(seed);
    const std::size_t n = x.rows();
    for (std::size_t attempt = 1; attempt <= kMaxSeedings; ++attempt) {
        KMeansResult res;
        res.attempts = attempt;
        res.centroids = plus_plus_seed(x, clusters, rng);
        res.assignments.assign(n, 0);
        bool empty = false;
        for (std::size_t it = 0; it < std::max<std::size_t>(iterations, 1) && !empty; ++it) {
            std::vector<std::size_t> counts(clusters, 0);
            for (std::size_t i = 0; i < n; ++i) {
                res.assignments[i] = nearest(x.row(i), res.centroids);
                ++counts[res.assignments[i]];
            }
            if (std::find(counts.begin(), counts.end(), 0u) != counts.end()) {
                empty = true;
                break;
            }
            Matrix next(clusters, x.cols());
            for (std::size_t i = 0; i < n; ++i) {
                auto dst = next.row(res.assignments[i]);
                const auto src = x.row(i);
                for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
            }
            for (std::size_t c = 0; c < clusters; ++c)
                for (auto& v : next.row(c)) v /= static_cast<double>(counts[c]);
            res.centroids = std::move(next);
        }
        if (!empty) return res;
    }
    throw Error(ErrorCode::EmptyCluster,
                "a cluster stayed empty after " + std::to_string(kMaxSeedings) + " seedings (duplicate rows?)");
}

Svd svd_jacobi(const Matrix& a) {
    if (a.rows() < a.cols()) {
        Svd t = svd_jacobi(transpose(a));
        return {std::move(t.v), std::move(t.s), std::move(t.u)};
    }
    const std::size_t m = a.rows();
    const std::size_t n = a.cols();
    Matrix w = a;
    Matrix v = Matrix::identity(n);
    constexpr double tol = 1e-15;
    for (int sweep = 0; sweep < 60; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    alpha += w(i, p) * w(i, p);
                    beta += w(i, q) * w(i, q);
                    gamma += w(i, p) * w(i, q);
                }
                if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double wp = w(i, p), wq = w(i, q);
                    w(i, p) = c * wp - s * wq;
                    w(i, q) = s * wp + c * wq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += w(i, j) * w(i, j);
        sigma[j] = std::sqrt(s);
    }
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

    Svd out{Matrix(m, n), std::vector<double>(n), Matrix(n, n)};
    for (std::size_t k = 0; k < n; ++k) {
        const std::size_t j = order[k];
        out.s[k] = sigma[j];
        for (std::size_t i = 0; i < m; ++i) out.u(i, k) = sigma[j] > 0.0 ? w(i, j) / sigma[j] : 0.0;
        for (std::size_t i = 0; i < n; ++i) out.v(i, k) = v(i, j);
    }
    return out;
}

std::size_t ClusteredLowRank::factor_values() const noexcept {
    std::size_t n = 0;
    for (const auto& f : factors) n += f.u.data().size() + f.v.data().size();
    return n;
}

void ClusteredLowRank::validate() const {
    auto bad = [](const std::string& msg) { throw Error(ErrorCode::InvalidArgument, msg); };
    if (rank == 0) bad("rank must be at least 1");
    if (factors.empty()) bad("no clusters");
    if (assignments.size() != rows) bad("assignment count differs from row count");
    std::vector<std::size_t> seen(rows, 0);
    for (std::size_t c = 0; c < factors.size(); ++c) {
        const auto& f = factors[c];
        if (f.members.empty()) bad("cluster " + std::to_string(c) + " is empty");
        if (f.u.rows() != f.members.size() || f.v.rows() != cols || f.u.cols() != f.v.cols() || f.u.cols() > rank)
            bad("cluster " + std::to_string(c) + " factor shapes are inconsistent");
        for (const auto m : f.members) {
            if (m >= rows || assignments[m] != c) bad("cluster " + std::to_string(c) + " member list is invalid");
            ++seen[m];
        }
    }
    for (std::size_t i = 0; i < rows; ++i)
        if (seen[i] != 1) bad("row " + std::to_string(i) + " is not in exactly one cluster");
    for (const auto& r : residual)
        if (r.row >= rows || r.col >= cols) bad("residual entry outside the matrix");
}

ClusteredLowRank decompose(const Matrix& e, std::size_t clusters, std::size_t rank, std::size_t residual_budget,
                           std::uint64_t seed) {
    if (e.rows() == 0 || e.cols() == 0) throw Error(ErrorCode::EmptyInput, "empty embedding matrix");
    if (rank == 0 || rank > e.cols())
        throw Error(ErrorCode::InvalidArgument, "rank must be in [1, " + std::to_string(e.cols()) + "]");
    if (e.rows() > std::numeric_limits<std::uint32_t>::max() || e.cols() > std::numeric_limits<std::uint32_t>::max())
        throw Error(ErrorCode::InvalidArgument, "matrix too large for 32-bit residual indices");

    const auto km = kmeans(e, clusters, seed);
    ClusteredLowRank out;
    out.rows = e.rows();
    out.cols = e.cols();
    out.rank = rank;
    out.assignments = km.assignments;
    out.factors.resize(clusters);
    for (std::size_t i = 0; i < e.rows(); ++i) out.factors[km.assignments[i]].members.push_back(i);

    const std::size_t d = e.cols();
    for (auto& f : out.factors) {
        Matrix block(f.members.size(), d);
        for (std::size_t i = 0; i < f.members.size(); ++i)
            std::copy(e.row(f.members[i]).begin(), e.row(f.members[i]).end(), block.row(i).begin());
        const Svd svd = svd_jacobi(block);
        const std::size_t rc = std::min({rank, f.members.size(), d});
        f.u = Matrix(f.members.size(), rc);
        f.v = Matrix(d, rc);
        for (std::size_t k = 0; k < rc; ++k) {
            for (std::size_t i = 0; i < f.members.size(); ++i) f.u(i, k) = svd.u(i, k) * svd.s[k];
            for (std::size_t j = 0; j < d; ++j) f.v(j, k) = svd.v(j, k);
        }
    }

    if (residual_budget > 0) {
        const Matrix err = sub(e, reconstruct(out));
        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < err.data().size(); ++i)
            if (err.data()[i] != 0.0) idx.push_back(i);
        const std::size_t keep = std::min(residual_budget, idx.size());
        std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(keep), idx.end(),
                          [&](std::size_t a, std::size_t b) {
                              const double ea = std::abs(err.data()[a]), eb = std::abs(err.data()[b]);
                              return ea != eb ? ea > eb : a < b;
                          });
        idx.resize(keep);
        std::sort(idx.begin(), idx.end());
        for (const auto i : idx)
            out.residual.push_back(
                {static_cast<std::uint32_t>(i / d), static_cast<std::uint32_t>(i % d), err.data()[i]});
    }
    return out;
}

Matrix reconstruct(const ClusteredLowRank& clr) {
    clr.validate();
    Matrix out(clr.rows, clr.cols);
    for (const auto& f : clr.factors) {
        const Matrix block = matmul_bt(f.u, f.v);
        for (std::size_t i = 0; i < f.members.size(); ++i)
            std::copy(block.row(i).begin(), block.row(i).end(), out.row(f.members[i]).begin());
    }
    for (const auto& r : clr.residual) out(r.row, r.col) += r.value;
    return out;
}

std::size_t stored_bytes(const ClusteredLowRank& clr, std::size_t bytes_per_value) {
    return clr.factor_values() * bytes_per_value + clr.residual.size() * (2 * 4 + bytes_per_value);
}

double compression_ratio(const ClusteredLowRank& clr, std::size_t bytes_per_value) {
    if (bytes_per_value == 0) throw Error(ErrorCode::InvalidArgument, "bytes_per_value must be positive");
    const double dense = static_cast<double>(clr.rows * clr.cols * bytes_per_value);
    return dense / static_cast<double>(stored_bytes(clr, bytes_per_value));
}

std::vector<std::uint8_t> serialize_factors(const ClusteredLowRank& clr) {
    clr.validate();
    ByteWriter w;
    w.magic(kFactorMagic);
    w.u16(kFactorVersion);
    w.u32(static_cast<std::uint32_t>(clr.rows));
    w.u32(static_cast<std::uint32_t>(clr.cols));
    w.u32(static_cast<std::uint32_t>(clr.rank));
    w.u32(static_cast<std::uint32_t>(clr.clusters()));
    for (const auto a : clr.assignments) w.u32(static_cast<std::uint32_t>(a));
    for (const auto& f : clr.factors) {
        w.u32(static_cast<std::uint32_t>(f.u.cols()));
        for (const auto x : f.u.data()) w.f32(static_cast<float>(x));
        for (const auto x : f.v.data()) w.f32(static_cast<float>(x));
    }
    w.u32(static_cast<std::uint32_t>(clr.residual.size()));
    for (const auto& r : clr.residual) {
        w.u32(r.row);
        w.u32(r.col);
        w.f32(static_cast<float>(r.value));
    }
    w.crc32_trailer();
    return w.take();
}

ClusteredLowRank deserialize_factors(std::span<const std::uint8_t> bytes) {
    ByteReader probe(bytes);
    probe.expect_magic(kFactorMagic);
    ByteReader r(check_crc32_trailer(bytes));
    r.expect_magic(kFactorMagic);
    const auto version = r.u16();
    if (version != kFactorVersion) throw Error(ErrorCode::UnsupportedVersion, "TVC1 version " + std::to_string(version));
    ClusteredLowRank out;
    out.rows = r.u32();
    out.cols = r.u32();
    out.rank = r.u32();
    const std::size_t clusters = r.u32();
    if (out.rows == 0 || out.cols == 0 || out.rank == 0 || clusters == 0 || clusters > out.rows)
        throw Error(ErrorCode::ParseError, "TVC1 header has invalid sizes");
    if (out.rows > r.remaining() / 4) throw Error(ErrorCode::TruncatedFile, "row count exceeds file size");
    out.assignments.resize(out.rows);
    out.factors.resize(clusters);
    for (std::size_t i = 0; i < out.rows; ++i) {
        out.assignments[i] = r.u32();
        if (out.assignments[i] >= clusters) throw Error(ErrorCode::ParseError, "assignment out of range");
        out.factors[out.assignments[i]].members.push_back(i);
    }
    for (auto& f : out.factors) {
        const std::size_t rc = r.u32();
        if (rc == 0 || rc > out.rank) throw Error(ErrorCode::ParseError, "cluster rank out of range");
        const std::size_t count = (f.members.size() + out.cols) * rc;
        if (count > r.remaining() / 4) throw Error(ErrorCode::TruncatedFile, "factor data exceeds file size");
        f.u = Matrix(f.members.size(), rc);
        f.v = Matrix(out.cols, rc);
        for (auto& x : f.u.data()) x = r.f32();
        for (auto& x : f.v.data()) x = r.f32();
    }
    const std::size_t n_res = r.u32();
    if (n_res > r.remaining() / 12) throw Error(ErrorCode::TruncatedFile, "residual count exceeds file size");
    out.residual.resize(n_res);
    for (auto& e : out.residual) {
        e.row = r.u32();
        e.col = r.u32();
        e.value = r.f32();
    }
    if (r.remaining() != 0) throw Error(ErrorCode::ParseError, "trailing bytes after residual");
    try {
        out.validate();
    } catch (const Error& e) {
        throw Error(ErrorCode::ParseError, e.what());
    }
    return out;
}

double elu1(double x) noexcept { return x > 0.0 ? x + 1.0 : std::exp(x); }

Matrix linear_attention(const Matrix& q, const Matrix& k, const Matrix& v, OpCounter* ops) {
    check_attention_inputs(q, k, v);
    const std::size_t n = q.rows(), d = q.cols(), dv = v.cols();
    std::uint64_t mults = 0;

    // d x dv summary phi(K)^T V and the d-vector phi(K)^T 1.
    Matrix kv(d, dv);
    std::vector<double> ksum(d, 0.0);
    std::vector<double> phi(d);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) phi[a] = elu1(k(i, a));
        for (std::size_t a = 0; a < d; ++a) {
            ksum[a] += phi[a];
            for (std::size_t b = 0; b < dv; ++b) kv(a, b) += phi[a] * v(i, b);
        }
        mults += d * dv;
    }

    Matrix out(n, dv);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t a = 0; a < d; ++a) phi[a] = elu1(q(i, a));
        double den = 0.0;
        for (std::size_t a = 0; a < d; ++a) den += phi[a] * ksum[a];
        den = std::max(den, kAttentionEpsilon);
        for (std::size_t b = 0; b < dv; ++b) {
            double num = 0.0;
            for (std::size_t a = 0; a < d; ++a) num += phi[a] * kv(a, b);
            out(i, b) = num / den;
        }
        mults += d + d * dv + dv;
    }
    if (ops) ops->multiplies += mults;
    return out;
}

Matrix linear_attention_weights(const Matrix& q, const Matrix& k) {
    const std::size_t n = q.rows();
    Matrix w(n, k.rows());
    for (std::size_t i = 0; i < n; ++i) {
        double den = 0.0;
        for (std::size_t j = 0; j < k.rows(); ++j) {
            w(i, j) = phi_dot(q.row(i), k.row(j));
            den += w(i, j);
        }
        den = std::max(den, kAttentionEpsilon);
        for (auto& x : w.row(i)) x /= den;
    }
    return w;
}

Matrix linear_attention_naive(const Matrix& q, const Matrix& k, const Matrix& v, OpCounter* ops) {
    check_attention_inputs(q, k, v);
    const std::size_t n = q.rows(), d = q.cols(), dv = v.cols();
    Matrix out(n, dv);
    std::vector<double> kern(n);
    for (std::size_t i = 0; i < n; ++i) {
        double den = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
            kern[j] = phi_dot(q.row(i), k.row(j));
            den += kern[j];
        }
        den = std::max(den, kAttentionEpsilon);
        for (std::size_t b = 0; b < dv; ++b) {
            double num = 0.0;
            for (std::size_t j = 0; j < n; ++j) num += kern[j] * v(j, b);
            out(i, b) = num / den;
        }
    }
    if (ops) ops->multiplies += n * n * d + n * n * dv + n * dv;
    return out;
}

AttentionWeights AttentionWeights::random(std::size_t d, std::uint64_t seed) {
    if (d == 0) throw Error(ErrorCode::InvalidArgument, "attention width must be positive");
    std::mt19937_64 rng(seed);
    AttentionWeights w;
    w.wq = random_square(d, rng);
    w.wk = random_square(d, rng);
    w.wv = random_square(d, rng);
    w.wo = random_square(d, rng);
    return w;
}

std::size_t AttentionWeights::parameter_count() const noexcept {
    return wq.data().size() + wk.data().size() + wv.data().size() + wo.data().size();
}

FusedAttentionWeights FusedAttentionWeights::fuse(const AttentionWeights& w) {
    const std::size_t d = w.wq.rows();
    check_square(w.wq, d, "W_Q");
    check_square(w.wk, d, "W_K");
    check_square(w.wv, d, "W_V");
    check_square(w.wo, d, "W_O");
    return {add(w.wq, w.wk), w.wv, w.wo};
}

std::size_t FusedAttentionWeights::parameter_count() const noexcept {
    return w_fused.data().size() + wv.data().size() + wo.data().size();
}

Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    check_attention_inputs(q, k, v);
    const Matrix scores = scale(matmul_bt(q, k), 1.0 / std::sqrt(static_cast<double>(q.cols())));
    return matmul(softmax_rows(scores), v);
}

Matrix standard_attention(const Matrix& x, const AttentionWeights& w) {
    const std::size_t d = x.cols();
    for (const auto* m : {&w.wq, &w.wk, &w.wv, &w.wo}) check_square(*m, d, "attention weight");
    const Matrix out = softmax_attention(matmul_bt(x, w.wq), matmul_bt(x, w.wk), matmul_bt(x, w.wv));
    return matmul_bt(out, w.wo);
}

Matrix fused_scores(const Matrix& x, const FusedAttentionWeights& w) {
    check_square(w.w_fused, x.cols(), "W_fused");
    const Matrix q = matmul_bt(x, w.w_fused);
    return scale(matmul_bt(q, q), 1.0 / std::sqrt(static_cast<double>(x.cols())));
}

Matrix fused_attention(const Matrix& x, const FusedAttentionWeights& w) {
    const std::size_t d = x.cols();
    check_square(w.w_fused, d, "W_fused");
    check_square(w.wv, d, "W_V");
    check_square(w.wo, d, "W_O");
    if (x.rows() == 0) throw Error(ErrorCode::EmptyInput, "attention needs at least one row");
    const Matrix attn = softmax_rows(fused_scores(x, w));
    return matmul_bt(matmul(attn, matmul_bt(x, w.wv)), w.wo);
}

}  // namespace tinyvlm
