#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "tinyvlm/tensor.hpp"

namespace tinyvlm {

struct KMeansResult {
    std::vector<std::size_t> assignments;
    Matrix centroids;
    std::size_t attempts = 0;  // seedings tried, 1 when the first one worked
};

// k-means++ seeding then a fixed number of Lloyd iterations. A cluster that
// goes empty triggers a fresh seeding; after 3 retries throws EmptyCluster.
KMeansResult kmeans(const Matrix& x, std::size_t clusters, std::uint64_t seed, std::size_t iterations = 25);

struct Svd {
    Matrix u;                    // m x k
    std::vector<double> s;       // k, descending
    Matrix v;                    // n x k
};

// Thin SVD by one-sided Jacobi rotations, k = min(m, n).
Svd svd_jacobi(const Matrix& a);

struct ResidualEntry {
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    double value = 0.0;
    friend bool operator==(const ResidualEntry&, const ResidualEntry&) = default;
};

struct ClusterFactors {
    std::vector<std::size_t> members;  // vocabulary rows, ascending
    Matrix u;                          // members x rank_c (singular values folded in)
    Matrix v;                          // d x rank_c
    friend bool operator==(const ClusterFactors&, const ClusterFactors&) = default;
};

struct ClusteredLowRank {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t rank = 0;
    std::vector<std::size_t> assignments;
    std::vector<ClusterFactors> factors;
    std::vector<ResidualEntry> residual;

    std::size_t clusters() const noexcept { return factors.size(); }
    std::size_t factor_values() const noexcept;
    // Throws InvalidArgument when the structure is inconsistent.
    void validate() const;
    friend bool operator==(const ClusteredLowRank&, const ClusteredLowRank&) = default;
};

// Clusters rows, keeps a rank-r truncated SVD per cluster, then stores the
// residual_budget largest reconstruction errors exactly. Clusters smaller than
// r keep all their rows' rank.
ClusteredLowRank decompose(const Matrix& e, std::size_t clusters, std::size_t rank, std::size_t residual_budget,
                           std::uint64_t seed = 42);
Matrix reconstruct(const ClusteredLowRank& clr);

// Dense bytes over stored bytes. Factor values cost bytes_per_value each,
// residual triples cost two 4-byte indices plus one value.
double compression_ratio(const ClusteredLowRank& clr, std::size_t bytes_per_value = 4);
std::size_t stored_bytes(const ClusteredLowRank& clr, std::size_t bytes_per_value = 4);

// TVC1: factors and residual stored as f32.
std::vector<std::uint8_t> serialize_factors(const ClusteredLowRank& clr);
ClusteredLowRank deserialize_factors(std::span<const std::uint8_t> bytes);

// Multiplication counter for the attention kernels.
struct OpCounter {
    std::uint64_t multiplies = 0;
};

// x + 1 for x > 0, e^x otherwise.
double elu1(double x) noexcept;

// phi(Q) (phi(K)^T V) / (phi(Q) phi(K)^T 1), right-associated.
Matrix linear_attention(const Matrix& q, const Matrix& k, const Matrix& v, OpCounter* ops = nullptr);
// Same formula with the N x N kernel matrix materialised.
Matrix linear_attention_naive(const Matrix& q, const Matrix& k, const Matrix& v, OpCounter* ops = nullptr);
// Row-normalized kernel weights phi(q_i).phi(k_j) / sum_j of the same.
Matrix linear_attention_weights(const Matrix& q, const Matrix& k);

struct AttentionWeights {
    Matrix wq, wk, wv, wo;
    static AttentionWeights random(std::size_t d, std::uint64_t seed);
    std::size_t parameter_count() const noexcept;
};

struct FusedAttentionWeights {
    Matrix w_fused, wv, wo;
    static FusedAttentionWeights fuse(const AttentionWeights& w);
    std::size_t parameter_count() const noexcept;
};

// softmax(Q K^T / sqrt(d)) V, projected by W_O, with Q = X W_Q^T etc.
Matrix standard_attention(const Matrix& x, const AttentionWeights& w);
Matrix fused_attention(const Matrix& x, const FusedAttentionWeights& w);
// Pre-softmax scores of the fused variant.
Matrix fused_scores(const Matrix& x, const FusedAttentionWeights& w);
// Softmax attention over explicit Q, K, V.
Matrix softmax_attention(const Matrix& q, const Matrix& k, const Matrix& v);

}  // namespace tinyvlm
