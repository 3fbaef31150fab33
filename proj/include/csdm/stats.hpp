#pragma once

#include <span>

#include "csdm/linalg.hpp"

namespace csdm::stats {

// Inverse standard normal CDF on (0, 1); Acklam's rational approximation
// refined by one Halley step against erfc.
double normal_quantile(double p);

// Linear interpolation between order statistics (R type 7) of sorted data.
double quantile_sorted(std::span<const double> sorted, double level);
double quantile(std::span<const double> values, double level);

double mean(std::span<const double> v);
// Sample standard deviation (n - 1 denominator); 0 for a single value.
double stddev(std::span<const double> v);
double median(std::span<const double> v);

// 1-D W2 between the empirical law of the samples and N(mu, sd^2), coupling
// the i-th order statistic with the (i + 1/2)/n quantile.
double w2_to_normal(std::span<const double> samples, double mu, double sd);
// 1-D W2 between two equal-size empirical laws (sorted coupling).
double w2_empirical(std::span<const double> a, std::span<const double> b);

// Least-squares line through (x, y); r2 is the coefficient of determination.
struct LineFit {
  double slope;
  double intercept;
  double r2;
};
LineFit fit_line(std::span<const double> x, std::span<const double> y);

}  // namespace csdm::stats
