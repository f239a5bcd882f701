#include "mst/nn.hpp"

#include "mst/common.hpp"

#include <cmath>
#include <numbers>

namespace mst::nn {

Matrix normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
    std::normal_distribution<double> dist(0.0, stddev);
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < m.size(); ++i) {
        // Truncate at two standard deviations.
        double v = dist(rng);
        while (std::abs(v) > 2.0 * stddev) v = dist(rng);
        m.data()[i] = v;
    }
    return m;
}

// --- Linear ----------------------------------------------------------------

Linear::Linear(const std::string& name, int in, int out, std::mt19937_64& rng, double init_std)
    : weight(name + ".weight", normal_matrix(in, out, init_std, rng)),
      bias(name + ".bias", Matrix::Zero(1, out)) {}

Matrix Linear::forward(const Matrix& x) const {
    Matrix y = x * weight.value;
    y.rowwise() += bias.value.row(0);
    return y;
}

Matrix Linear::backward(const Matrix& x, const Matrix& dy) {
    weight.grad.noalias() += x.transpose() * dy;
    bias.grad += dy.colwise().sum();
    return dy * weight.value.transpose();
}

void Linear::collect(ParameterList& out) {
    out.push_back(&weight);
    out.push_back(&bias);
}

void Linear::collect(ConstParameterList& out) const {
    out.push_back(&weight);
    out.push_back(&bias);
}

// --- LayerNorm ---------------------------------------------------------------

LayerNorm::LayerNorm(const std::string& name, int dim)
    : gamma(name + ".gamma", Matrix::Ones(1, dim)), beta(name + ".beta", Matrix::Zero(1, dim)) {}

Matrix LayerNorm::forward(const Matrix& x, LayerNormCache* cache) const {
    const Eigen::Index n = x.cols();
    Matrix xhat(x.rows(), n);
    Eigen::VectorXd inv_std(x.rows());
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
        double mean = x.row(r).mean();
        double var = (x.row(r).array() - mean).square().sum() / static_cast<double>(n);
        inv_std(r) = 1.0 / std::sqrt(var + eps);
        xhat.row(r) = (x.row(r).array() - mean) * inv_std(r);
    }
    Matrix y = xhat.array().rowwise() * gamma.value.row(0).array();
    y.rowwise() += beta.value.row(0);
    if (cache != nullptr) {
        cache->normalized = std::move(xhat);
        cache->inv_std = std::move(inv_std);
    }
    return y;
}

Matrix LayerNorm::backward(const LayerNormCache& cache, const Matrix& dy) {
    const auto& xhat = cache.normalized;
    gamma.grad += (dy.array() * xhat.array()).colwise().sum().matrix();
    beta.grad += dy.colwise().sum();
    Matrix dxhat = dy.array().rowwise() * gamma.value.row(0).array();
    const double n = static_cast<double>(dy.cols());
    Matrix dx(dy.rows(), dy.cols());
    for (Eigen::Index r = 0; r < dy.rows(); ++r) {
        double mean_d = dxhat.row(r).sum() / n;
        double mean_dx = dxhat.row(r).dot(xhat.row(r)) / n;
        dx.row(r) = cache.inv_std(r) *
                    (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
    }
    return dx;
}

void LayerNorm::collect(ParameterList& out) {
    out.push_back(&gamma);
    out.push_back(&beta);
}

void LayerNorm::collect(ConstParameterList& out) const {
    out.push_back(&gamma);
    out.push_back(&beta);
}

// --- attention -----------------------------------------------------------------

Matrix softmax_rows(const Matrix& s) {
    Matrix p(s.rows(), s.cols());
    for (Eigen::Index r = 0; r < s.rows(); ++r) {
        double mx = s.row(r).maxCoeff();
        p.row(r) = (s.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

MultiHeadAttention::MultiHeadAttention(const std::string& name, int dim, int heads, std::mt19937_64& rng)
    : qkv(name + ".qkv", dim, 3 * dim, rng), proj(name + ".proj", dim, dim, rng), dim_(dim), heads_(heads) {
    if (heads < 1 || dim % heads != 0) {
        throw Error("precondition", name + ": embed dim " + std::to_string(dim) +
                                        " not divisible by " + std::to_string(heads) + " heads");
    }
}

Matrix MultiHeadAttention::forward(const Matrix& x, int seq_len, AttentionCache* cache,
                                   std::vector<Matrix>* probs_out) const {
    if (seq_len < 1 || x.rows() % seq_len != 0) throw Error("shape", "attention: rows not a multiple of seq_len");
    const int groups = static_cast<int>(x.rows() / seq_len);
    const int dh = dim_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix qkv_out = qkv.forward(x);
    Matrix concat(x.rows(), dim_);
    std::vector<Matrix> probs;
    const bool keep = cache != nullptr || probs_out != nullptr;
    if (keep) probs.reserve(static_cast<std::size_t>(groups * heads_));
    for (int g = 0; g < groups; ++g) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(g) * seq_len;
        for (int h = 0; h < heads_; ++h) {
            auto q = qkv_out.block(r0, h * dh, seq_len, dh);
            auto k = qkv_out.block(r0, dim_ + h * dh, seq_len, dh);
            auto v = qkv_out.block(r0, 2 * dim_ + h * dh, seq_len, dh);
            Matrix p = softmax_rows((q * k.transpose()) * scale);
            concat.block(r0, h * dh, seq_len, dh).noalias() = p * v;
            if (keep) probs.push_back(std::move(p));
        }
    }
    Matrix y = proj.forward(concat);
    if (probs_out != nullptr) *probs_out = probs;
    if (cache != nullptr) {
        cache->input = x;
        cache->qkv = std::move(qkv_out);
        cache->concat = std::move(concat);
        cache->probs = std::move(probs);
    }
    return y;
}

Matrix MultiHeadAttention::backward(const AttentionCache& cache, int seq_len, const Matrix& dy) {
    const int groups = static_cast<int>(cache.input.rows() / seq_len);
    const int dh = dim_ / heads_;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    Matrix dconcat = proj.backward(cache.concat, dy);
    Matrix dqkv = Matrix::Zero(cache.qkv.rows(), cache.qkv.cols());
    for (int g = 0; g < groups; ++g) {
        const Eigen::Index r0 = static_cast<Eigen::Index>(g) * seq_len;
        for (int h = 0; h < heads_; ++h) {
            const Matrix& p = cache.probs[static_cast<std::size_t>(g * heads_ + h)];
            auto q = cache.qkv.block(r0, h * dh, seq_len, dh);
            auto k = cache.qkv.block(r0, dim_ + h * dh, seq_len, dh);
            auto v = cache.qkv.block(r0, 2 * dim_ + h * dh, seq_len, dh);
            auto dout = dconcat.block(r0, h * dh, seq_len, dh);

            Matrix dp = dout * v.transpose();
            dqkv.block(r0, 2 * dim_ + h * dh, seq_len, dh).noalias() = p.transpose() * dout;
            Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
            Matrix ds = p.array() * (dp.array().colwise() - row_dot.array());
            ds *= scale;
            dqkv.block(r0, h * dh, seq_len, dh).noalias() = ds * k;
            dqkv.block(r0, dim_ + h * dh, seq_len, dh).noalias() = ds.transpose() * q;
        }
    }
    return qkv.backward(cache.input, dqkv);
}

void MultiHeadAttention::collect(ParameterList& out) {
    qkv.collect(out);
    proj.collect(out);
}

void MultiHeadAttention::collect(ConstParameterList& out) const {
    qkv.collect(out);
    proj.collect(out);
}

// --- block -----------------------------------------------------------------------

double gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::numbers::sqrt2)); }

double gelu_grad(double x) {
    const double cdf = 0.5 * (1.0 + std::erf(x / std::numbers::sqrt2));
    const double pdf = std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
    return cdf + x * pdf;
}

TransformerBlock::TransformerBlock(const std::string& name, int dim, int heads, int mlp_ratio,
                                   std::mt19937_64& rng)
    : ln1_(name + ".ln1", dim),
      attn_(name + ".attn", dim, heads, rng),
      ln2_(name + ".ln2", dim),
      fc1_(name + ".fc1", dim, dim * mlp_ratio, rng),
      fc2_(name + ".fc2", dim * mlp_ratio, dim, rng) {}

Matrix TransformerBlock::forward(const Matrix& x, int seq_len, BlockCache* cache,
                                 std::vector<Matrix>* probs_out) const {
    LayerNormCache* ln1c = cache ? &cache->ln1 : nullptr;
    LayerNormCache* ln2c = cache ? &cache->ln2 : nullptr;
    AttentionCache* ac = cache ? &cache->attn : nullptr;

    Matrix x1 = x + attn_.forward(ln1_.forward(x, ln1c), seq_len, ac, probs_out);
    Matrix h = ln2_.forward(x1, ln2c);
    Matrix pre = fc1_.forward(h);
    Matrix post = pre.unaryExpr([](double v) { return gelu(v); });
    Matrix y = x1 + fc2_.forward(post);
    if (cache != nullptr) {
        cache->after_attn = std::move(x1);
        cache->mlp_in = std::move(h);
        cache->hidden_pre = std::move(pre);
        cache->hidden_post = std::move(post);
    }
    return y;
}

Matrix TransformerBlock::backward(const BlockCache& cache, int seq_len, const Matrix& dy) {
    Matrix dpost = fc2_.backward(cache.hidden_post, dy);
    Matrix dpre = dpost.array() * cache.hidden_pre.unaryExpr([](double v) { return gelu_grad(v); }).array();
    Matrix dh = fc1_.backward(cache.mlp_in, dpre);
    Matrix dx1 = dy + ln2_.backward(cache.ln2, dh);
    Matrix dattn_in = attn_.backward(cache.attn, seq_len, dx1);
    return dx1 + ln1_.backward(cache.ln1, dattn_in);
}

void TransformerBlock::collect(ParameterList& out) {
    ln1_.collect(out);
    attn_.collect(out);
    ln2_.collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
}

void TransformerBlock::collect(ConstParameterList& out) const {
    ln1_.collect(out);
    attn_.collect(out);
    ln2_.collect(out);
    fc1_.collect(out);
    fc2_.collect(out);
}

// --- optimizer -------------------------------------------------------------------

void zero_grads(const ParameterList& params) {
    for (auto* p : params) p->grad.setZero();
}

void AdamW::step(const ParameterList& params) {
    if (m_.empty()) {
        for (auto* p : params) {
            m_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
            v_.push_back(Matrix::Zero(p->value.rows(), p->value.cols()));
        }
    }
    if (m_.size() != params.size()) throw Error("internal", "AdamW: parameter list changed between steps");
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Parameter& p = *params[i];
        m_[i] = opt_.beta1 * m_[i] + (1.0 - opt_.beta1) * p.grad;
        v_[i] = opt_.beta2 * v_[i] + (1.0 - opt_.beta2) * p.grad.cwiseProduct(p.grad);
        // Decay applies to weight matrices only, not biases, norms or embeddings.
        const bool decays = p.name.ends_with(".weight");
        if (decays) p.value -= (opt_.lr * opt_.weight_decay) * p.value;
        p.value.array() -= opt_.lr * (m_[i].array() / bc1) / ((v_[i].array() / bc2).sqrt() + opt_.eps);
    }
}

}  // namespace mst::nn
