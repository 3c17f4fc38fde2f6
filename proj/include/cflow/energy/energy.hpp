#pragma once

#include <cmath>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "cflow/energy/classifier.hpp"

namespace cflow::energy {

/// Suppression scale used by the benchmark runs.
inline constexpr double kDefaultLambda = 5.0;

/// Analytic energies saturate at +-kEnergySaturation; kEnergyWidth is the
/// distance over which they cross from one sign to the other.
inline constexpr double kEnergySaturation = 5.0;
inline constexpr double kEnergyWidth = 0.1;

/// Suppression weight sigma(-lambda * F).
inline double suppression_weight(double energy, double lambda) { return diffcore::sigmoid(-lambda * energy); }

/// Scalar energy F(x) with a suppression scale lambda.
///
/// Sign convention: F is high where a point looks like forget content and low
/// on retained content, so sigma(-lambda F) suppresses the forget region.
/// Specs are immutable values; copies share their subtrees.
class EnergySpec {
 public:
  enum class Kind { analytic_region, classifier_logit, inverted, sum };

  static EnergySpec analytic(datasets::Benchmark benchmark, double lambda = kDefaultLambda) {
    return EnergySpec(Analytic{benchmark}, lambda);
  }

  static EnergySpec from_classifier(std::shared_ptr<const BinaryClassifier> classifier,
                                    double lambda = kDefaultLambda, std::string source = {}) {
    if (!classifier || !classifier->trained())
      fail(ErrorKind::state, "energy from an untrained classifier");
    return EnergySpec(Classifier{std::move(classifier), std::move(source)}, lambda);
  }

  static EnergySpec sum(std::vector<EnergySpec> terms, double lambda = kDefaultLambda) {
    if (terms.empty()) fail(ErrorKind::precondition, "sum of no energies");
    return EnergySpec(Sum{std::move(terms)}, lambda);
  }

  /// -F with the same lambda.
  EnergySpec inverted() const { return EnergySpec(Inverted{std::make_shared<EnergySpec>(*this)}, lambda_); }

  EnergySpec with_lambda(double lambda) const {
    EnergySpec copy = *this;
    copy.set_lambda(lambda);
    return copy;
  }

  Kind kind() const { return static_cast<Kind>(node_.index()); }
  double lambda() const { return lambda_; }

  Vector evaluate(const Batch& x) const {
    if (x.cols() != 2) fail(ErrorKind::shape, "energies are defined on 2D points");
    if (!x.allFinite()) fail(ErrorKind::numeric, "energy evaluated at non-finite points");
    return std::visit([&](const auto& n) { return eval(n, x); }, node_);
  }

  /// sigma(-lambda F(x)) per row.
  Vector weight(const Batch& x) const {
    Vector f = evaluate(x);
    for (Eigen::Index i = 0; i < f.size(); ++i) f(i) = suppression_weight(f(i), lambda_);
    return f;
  }

  nlohmann::json to_json() const {
    nlohmann::json j;
    std::visit(
        [&](const auto& n) {
          using T = std::decay_t<decltype(n)>;
          if constexpr (std::is_same_v<T, Analytic>) {
            j = {{"kind", "analytic"}, {"benchmark", datasets::to_string(n.benchmark)}};
          } else if constexpr (std::is_same_v<T, Classifier>) {
            j = {{"kind", "classifier"}, {"checkpoint", n.source}};
          } else if constexpr (std::is_same_v<T, Inverted>) {
            j = {{"kind", "inverted"}, {"inner", n.inner->to_json()}};
          } else {
            j = {{"kind", "sum"}, {"terms", nlohmann::json::array()}};
            for (const auto& t : n.terms) j["terms"].push_back(t.to_json());
          }
        },
        node_);
    j["lambda"] = lambda_;
    return j;
  }

  /// Parses the JSON form written by to_json. Classifier checkpoints are
  /// resolved relative to `base_dir`.
  static EnergySpec from_json(const nlohmann::json& j, const std::filesystem::path& base_dir = {}) {
    try {
      const std::string kind = j.at("kind").get<std::string>();
      static const std::vector<std::string> common{"kind", "lambda"};
      auto check_keys = [&](std::vector<std::string> allowed) {
        allowed.insert(allowed.end(), common.begin(), common.end());
        for (const auto& [key, _] : j.items())
          if (std::find(allowed.begin(), allowed.end(), key) == allowed.end())
            fail(ErrorKind::config, "unknown energy key '" + key + "'");
      };
      if (kind == "analytic") {
        check_keys({"benchmark"});
        return analytic(datasets::parse_benchmark(j.at("benchmark").get<std::string>()), j.value("lambda", kDefaultLambda));
      }
      if (kind == "classifier") {
        check_keys({"checkpoint"});
        std::filesystem::path p = j.at("checkpoint").get<std::string>();
        if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
        auto c = std::make_shared<const BinaryClassifier>(BinaryClassifier::load(p));
        return from_classifier(std::move(c), j.value("lambda", kDefaultLambda), p.string());
      }
      if (kind == "inverted") {
        check_keys({"inner"});
        EnergySpec inner = from_json(j.at("inner"), base_dir);
        EnergySpec inv = inner.inverted();
        if (j.contains("lambda")) inv.set_lambda(j.at("lambda").get<double>());
        return inv;
      }
      if (kind == "sum") {
        check_keys({"terms"});
        std::vector<EnergySpec> terms;
        for (const auto& t : j.at("terms")) terms.push_back(from_json(t, base_dir));
        return sum(std::move(terms), j.value("lambda", kDefaultLambda));
      }
      fail(ErrorKind::config, "unknown energy kind '" + kind + "'");
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorKind::config, std::string("energy spec: ") + e.what());
    }
  }

 private:
  struct Analytic {
    datasets::Benchmark benchmark;
  };
  struct Classifier {
    std::shared_ptr<const BinaryClassifier> classifier;
    std::string source;
  };
  struct Inverted {
    std::shared_ptr<const EnergySpec> inner;
  };
  struct Sum {
    std::vector<EnergySpec> terms;
  };
  using Node = std::variant<Analytic, Classifier, Inverted, Sum>;

  EnergySpec(Node node, double lambda) : node_(std::move(node)) { set_lambda(lambda); }

  void set_lambda(double lambda) {
    if (!(lambda > 0.0) || !std::isfinite(lambda)) fail(ErrorKind::precondition, "lambda must be positive and finite");
    lambda_ = lambda;
  }

  static Vector eval(const Analytic& n, const Batch& x) {
    Vector f(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const auto d = datasets::region_distances(n.benchmark, x(i, 0), x(i, 1));
      f(i) = kEnergySaturation * std::tanh((d.retain - d.forget) / kEnergyWidth);
    }
    return f;
  }

  static Vector eval(const Classifier& n, const Batch& x) { return n.classifier->logit(x); }

  static Vector eval(const Inverted& n, const Batch& x) { return -n.inner->evaluate(x); }

  static Vector eval(const Sum& n, const Batch& x) {
    Vector f = n.terms.front().evaluate(x);
    for (std::size_t k = 1; k < n.terms.size(); ++k) f += n.terms[k].evaluate(x);
    return f;
  }

  Node node_;
  double lambda_ = kDefaultLambda;
};

inline EnergySpec invert(const EnergySpec& f) { return f.inverted(); }

}  // namespace cflow::energy
