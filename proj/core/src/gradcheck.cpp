#include "pgd/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace pgd {

GradcheckReport gradcheck(const std::string& name,
                          const std::function<Tensor(const std::vector<Tensor>&)>& f,
                          std::vector<Tensor> inputs, const GradcheckOptions& options) {
  for (auto& x : inputs) {
    if (x.dtype() != DType::f64) {
      throw ConfigError("gradcheck '" + name + "': inputs must be f64, got " + to_string(x.dtype()));
    }
    if (!x.is_leaf()) throw ConfigError("gradcheck '" + name + "': inputs must be leaf tensors");
    x.zero_grad();
    x.set_requires_grad(true);
  }

  Tensor y = f(inputs);
  if (y.numel() != 1) throw ShapeError("gradcheck '" + name + "': function is not scalar-valued");
  backward(y);

  GradcheckReport report;
  report.name = name;
  report.tolerance = options.tolerance;

  const double h = options.step;
  for (auto& x : inputs) {
    Tensor analytic = x.grad();
    auto values = x.data<double>();
    const std::size_t n = values.size();
    std::size_t stride = 1;
    if (options.max_coords > 0 && n > options.max_coords) stride = (n + options.max_coords - 1) / options.max_coords;
    for (std::size_t i = 0; i < n; i += stride) {
      const double saved = values[i];
      double fp = 0.0, fm = 0.0;
      {
        NoGradGuard guard;
        values[i] = saved + h;
        fp = f(inputs).item();
        values[i] = saved - h;
        fm = f(inputs).item();
      }
      values[i] = saved;
      const double fd = (fp - fm) / (2.0 * h);
      const double an = analytic.defined() ? analytic.at(static_cast<std::int64_t>(i)) : 0.0;
      const double denom = std::max({std::abs(an), std::abs(fd), 1e-6});
      report.max_rel_error = std::max(report.max_rel_error, std::abs(an - fd) / denom);
      ++report.checked;
    }
    x.set_requires_grad(false);
    x.zero_grad();
  }
  report.passed = report.max_rel_error < options.tolerance;
  return report;
}

GradcheckReport gradcheck(const std::string& name, const std::function<Tensor(const Tensor&)>& f, Tensor x,
                          const GradcheckOptions& options) {
  return gradcheck(
      name, [&](const std::vector<Tensor>& in) { return f(in[0]); }, std::vector<Tensor>{x}, options);
}

}  // namespace pgd
