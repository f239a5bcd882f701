#pragma once

// Minimal transformer building blocks with hand-written backward passes.
// Tokens are rows; a batch of sequences is stacked vertically and attention
// runs independently over each consecutive group of `seq_len` rows.

#include <Eigen/Dense>

#include <random>
#include <string>
#include <vector>

namespace mst::nn {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowVector = Eigen::Matrix<double, 1, Eigen::Dynamic>;

struct Parameter {
    std::string name;
    Matrix value;
    Matrix grad;

    Parameter() = default;
    Parameter(std::string n, Matrix v) : name(std::move(n)), value(std::move(v)) {
        grad = Matrix::Zero(value.rows(), value.cols());
    }
};

using ParameterList = std::vector<Parameter*>;
using ConstParameterList = std::vector<const Parameter*>;

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng);

class Linear {
public:
    Linear() = default;
    Linear(const std::string& name, int in, int out, std::mt19937_64& rng, double init_std = 0.02);

    Matrix forward(const Matrix& x) const;
    // Accumulates parameter gradients; returns dL/dx.
    Matrix backward(const Matrix& x, const Matrix& dy);
    void collect(ParameterList& out);
    void collect(ConstParameterList& out) const;

    Parameter weight;  // in x out
    Parameter bias;    // 1 x out
};

struct LayerNormCache {
    Matrix normalized;
    Eigen::VectorXd inv_std;
};

class LayerNorm {
public:
    LayerNorm() = default;
    LayerNorm(const std::string& name, int dim);

    Matrix forward(const Matrix& x, LayerNormCache* cache = nullptr) const;
    Matrix backward(const LayerNormCache& cache, const Matrix& dy);
    void collect(ParameterList& out);
    void collect(ConstParameterList& out) const;

    Parameter gamma;
    Parameter beta;
    double eps = 1e-6;
};

struct AttentionCache {
    Matrix input;
    Matrix qkv;
    Matrix concat;
    std::vector<Matrix> probs;  // group-major, then head
};

class MultiHeadAttention {
public:
    MultiHeadAttention() = default;
    MultiHeadAttention(const std::string& name, int dim, int heads, std::mt19937_64& rng);

    // `probs_out`, when given, receives the softmax matrices (group-major, then head).
    Matrix forward(const Matrix& x, int seq_len, AttentionCache* cache = nullptr,
                   std::vector<Matrix>* probs_out = nullptr) const;
    Matrix backward(const AttentionCache& cache, int seq_len, const Matrix& dy);
    void collect(ParameterList& out);
    void collect(ConstParameterList& out) const;

    int heads() const { return heads_; }

    Linear qkv;
    Linear proj;

private:
    int dim_ = 0;
    int heads_ = 1;
};

struct BlockCache {
    LayerNormCache ln1;
    AttentionCache attn;
    Matrix after_attn;
    LayerNormCache ln2;
    Matrix mlp_in;
    Matrix hidden_pre;   // fc1 output before GELU
    Matrix hidden_post;  // GELU output
};

/// Pre-norm transformer encoder block with a GELU feed-forward network.
class TransformerBlock {
public:
    TransformerBlock() = default;
    TransformerBlock(const std::string& name, int dim, int heads, int mlp_ratio, std::mt19937_64& rng);

    Matrix forward(const Matrix& x, int seq_len, BlockCache* cache = nullptr,
                   std::vector<Matrix>* probs_out = nullptr) const;
    Matrix backward(const BlockCache& cache, int seq_len, const Matrix& dy);
    void collect(ParameterList& out);
    void collect(ConstParameterList& out) const;

    const MultiHeadAttention& attention() const { return attn_; }

private:
    LayerNorm ln1_;
    MultiHeadAttention attn_;
    LayerNorm ln2_;
    Linear fc1_;
    Linear fc2_;
};

double gelu(double x);
double gelu_grad(double x);

// Row-wise softmax, numerically stabilized.
Matrix softmax_rows(const Matrix& s);

void zero_grads(const ParameterList& params);

/// Decoupled-weight-decay Adam. Moments are keyed by parameter position in
/// the list handed to step(), which must stay stable between calls.
class AdamW {
public:
    struct Options {
        double lr = 1e-6;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.01;
    };

    explicit AdamW(Options opt) : opt_(opt) {}

    void step(const ParameterList& params);
    long steps() const { return t_; }

private:
    Options opt_;
    long t_ = 0;
    std::vector<Matrix> m_;
    std::vector<Matrix> v_;
};

}  // namespace mst::nn
