#include "frm/reference.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <sstream>

namespace frm {

namespace {

// out[o][p] = b[o] + sum_c w[o][c] x[c][p] for one image.
template <typename T>
std::vector<double> pointwise_literal(Conv2d<T>& conv, const std::vector<double>& x, std::size_t positions) {
  const std::size_t in = conv.spec().in_channels;
  const std::size_t out = conv.spec().out_channels;
  const auto w = conv.weight().data();
  std::vector<double> y(out * positions, 0.0);
  for (std::size_t o = 0; o < out; ++o)
    for (std::size_t p = 0; p < positions; ++p) {
      double acc = conv.has_bias() ? static_cast<double>(conv.bias().data()[o]) : 0.0;
      for (std::size_t c = 0; c < in; ++c) acc += static_cast<double>(w[o * in + c]) * x[c * positions + p];
      y[o * positions + p] = acc;
    }
  return y;
}

}  // namespace

template <typename T>
std::vector<double> dnl_literal(DnlBlock<T>& block, const BasicTensor<T>& x) {
  const Shape& s = x.shape();
  const std::size_t channels = s[1];
  const std::size_t hw = s[2] * s[3];
  const std::size_t ca = block.attention_channels();
  std::vector<double> result(x.numel());
  for (std::size_t n = 0; n < s[0]; ++n) {
    std::vector<double> xi(channels * hw);
    for (std::size_t i = 0; i < xi.size(); ++i) xi[i] = static_cast<double>(x.data()[n * channels * hw + i]);
    const auto q = pointwise_literal(block.query(), xi, hw);
    const auto k = pointwise_literal(block.key(), xi, hw);
    const auto m = pointwise_literal(block.unary(), xi, hw);
    const auto v = pointwise_literal(block.value(), xi, hw);

    std::vector<double> mu_q(ca, 0.0);
    std::vector<double> mu_k(ca, 0.0);
    for (std::size_t c = 0; c < ca; ++c) {
      for (std::size_t p = 0; p < hw; ++p) {
        mu_q[c] += q[c * hw + p];
        mu_k[c] += k[c * hw + p];
      }
      mu_q[c] /= static_cast<double>(hw);
      mu_k[c] /= static_cast<double>(hw);
    }

    double m_max = m[0];
    for (std::size_t j = 1; j < hw; ++j) m_max = std::max(m_max, m[j]);
    double m_den = 0;
    for (std::size_t j = 0; j < hw; ++j) m_den += std::exp(m[j] - m_max);

    std::vector<double> y(channels * hw, 0.0);
    for (std::size_t i = 0; i < hw; ++i) {
      std::vector<double> score(hw);
      for (std::size_t j = 0; j < hw; ++j) {
        double acc = 0;
        for (std::size_t c = 0; c < ca; ++c) acc += (q[c * hw + i] - mu_q[c]) * (k[c * hw + j] - mu_k[c]);
        score[j] = acc;
      }
      const double s_max = *std::max_element(score.begin(), score.end());
      double den = 0;
      for (std::size_t j = 0; j < hw; ++j) den += std::exp(score[j] - s_max);
      for (std::size_t j = 0; j < hw; ++j) {
        const double w = std::exp(score[j] - s_max) / den + std::exp(m[j] - m_max) / m_den;
        for (std::size_t c = 0; c < channels; ++c) y[c * hw + i] += w * v[c * hw + j];
      }
    }

    const auto out = pointwise_literal(block.projection(), y, hw);
    for (std::size_t i = 0; i < out.size(); ++i) {
      result[n * channels * hw + i] = out[i] + (block.residual() ? xi[i] : 0.0);
    }
  }
  return result;
}

template std::vector<double> dnl_literal(DnlBlock<float>&, const BasicTensor<float>&);
template std::vector<double> dnl_literal(DnlBlock<double>&, const BasicTensor<double>&);

double OracleSweep::max_deviation() const {
  double worst = singleton_deviation;
  for (const auto& c : cases) worst = std::max(worst, c.max_deviation);
  return worst;
}

bool OracleSweep::passed() const { return !cases.empty() && max_deviation() < tolerance; }

std::string OracleSweep::format() const {
  std::ostringstream out;
  out << std::scientific << std::setprecision(3);
  for (const auto& c : cases) {
    out << "C=" << c.channels << " " << c.height << "x" << c.width << "  max |dev| " << c.max_deviation << "\n";
  }
  out << "singleton y = 2 v  max |dev| " << singleton_deviation << "\n";
  out << "worst " << max_deviation() << " (tolerance " << tolerance << "): " << (passed() ? "PASS" : "FAIL") << "\n";
  return out.str();
}

OracleSweep run_dnl_oracle_sweep(std::uint64_t seed, std::size_t max_extent, const std::vector<std::size_t>& channels,
                                 double tolerance) {
  OracleSweep sweep;
  sweep.tolerance = tolerance;
  Rng rng(seed);
  std::normal_distribution<float> normal(0.0f, 1.0f);
  NoGradGuard no_grad;
  for (std::size_t c : channels) {
    for (std::size_t h = 1; h <= max_extent; ++h) {
      for (std::size_t w = 1; w <= max_extent; ++w) {
        DnlBlock<float> block(DnlConfig{c, true});
        block.init_kaiming(rng);
        // Non-zero biases so the whitening is exercised.
        for (Conv2d<float>* conv : {&block.query(), &block.key(), &block.unary(), &block.value()}) {
          for (float& b : conv->bias().mutable_data()) b = normal(rng);
        }
        Tensor x(Shape{2, c, h, w});
        for (float& v : x.mutable_data()) v = normal(rng);
        const auto fast = block.forward(x);
        const auto slow = dnl_literal(block, x);
        OracleCase oc{c, h, w, 0.0};
        for (std::size_t i = 0; i < slow.size(); ++i) {
          oc.max_deviation = std::max(oc.max_deviation, std::abs(static_cast<double>(fast.data()[i]) - slow[i]));
        }
        sweep.cases.push_back(oc);

        if (h == 1 && w == 1) {
          const auto v = block.value().forward(x);
          const auto y = dnl_attend(block.transforms(x));
          for (std::size_t i = 0; i < v.numel(); ++i) {
            sweep.singleton_deviation =
                std::max(sweep.singleton_deviation,
                         std::abs(static_cast<double>(y.data()[i]) - 2.0 * static_cast<double>(v.data()[i])));
          }
        }
      }
    }
  }
  return sweep;
}

}  // namespace frm
