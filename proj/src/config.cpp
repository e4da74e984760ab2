#include "glamp/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>

#include "glamp/error.hpp"

namespace glamp {

using nlohmann::json;

namespace {

/// Walks a JSON object while tracking the key path for error messages.
class Node {
 public:
  Node(const json& j, std::string path) : j_(j), path_(std::move(path)) {}

  const json& raw() const { return j_; }
  const std::string& path() const { return path_; }

  void expect_object(std::initializer_list<const char*> allowed) const {
    if (!j_.is_object()) fail("expected an object");
    std::set<std::string> ok(allowed.begin(), allowed.end());
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!ok.count(it.key())) throw ConfigError(child_path(it.key()) + ": unknown key");
  }
  bool has(const char* key) const { return j_.is_object() && j_.contains(key); }
  Node at(const char* key) const {
    if (!has(key)) throw ConfigError(child_path(key) + ": missing required key");
    return Node(j_.at(key), child_path(key));
  }
  Node index(std::size_t i) const {
    return Node(j_.at(i), path_ + "[" + std::to_string(i) + "]");
  }

  double number() const {
    if (!j_.is_number()) fail("expected a number");
    return j_.get<double>();
  }
  double positive() const {
    const double v = number();
    if (!(v > 0.0)) fail("must be positive");
    return v;
  }
  double non_negative() const {
    const double v = number();
    if (!(v >= 0.0)) fail("must be non-negative");
    return v;
  }
  int positive_int() const {
    if (!j_.is_number_integer() || j_.get<long long>() < 1) fail("expected a positive integer");
    return static_cast<int>(j_.get<long long>());
  }
  std::string string() const {
    if (!j_.is_string()) fail("expected a string");
    return j_.get<std::string>();
  }
  bool boolean() const {
    if (!j_.is_boolean()) fail("expected a boolean");
    return j_.get<bool>();
  }
  std::vector<double> numbers() const {
    if (!j_.is_array()) fail("expected an array of numbers");
    std::vector<double> out;
    for (std::size_t i = 0; i < j_.size(); ++i) out.push_back(index(i).number());
    return out;
  }

  [[noreturn]] void fail(const std::string& what) const { throw ConfigError(path_ + ": " + what); }

 private:
  std::string child_path(const std::string& key) const {
    return path_.empty() ? key : path_ + "." + key;
  }
  const json& j_;
  std::string path_;
};

Vec to_vec(const std::vector<double>& v) {
  return Eigen::Map<const Vec>(v.data(), static_cast<Eigen::Index>(v.size()));
}

CovarianceSpec parse_covariance(const Node& n, int p) {
  CovarianceSpec c;
  if (n.raw().is_string()) {
    if (n.string() != "identity") n.fail("string form must be \"identity\"");
    return c;
  }
  n.expect_object({"kind", "chi", "matrix"});
  const std::string kind = n.at("kind").string();
  if (kind == "identity") {
    c.kind = CovarianceSpec::Kind::identity;
  } else if (kind == "two-eigenvalue") {
    c.kind = CovarianceSpec::Kind::two_eigenvalue;
    c.chi = n.at("chi").positive();
    if (p % 2 != 0) n.fail("two-eigenvalue covariance requires even p");
  } else if (kind == "dense") {
    c.kind = CovarianceSpec::Kind::dense;
    const Node m = n.at("matrix");
    if (!m.raw().is_array() || static_cast<int>(m.raw().size()) != p) m.fail("expected p rows");
    c.matrix.resize(p, p);
    for (int i = 0; i < p; ++i) {
      const auto row = m.index(static_cast<std::size_t>(i)).numbers();
      if (static_cast<int>(row.size()) != p) m.index(static_cast<std::size_t>(i)).fail("expected p entries");
      for (int k = 0; k < p; ++k) c.matrix(i, k) = row[static_cast<std::size_t>(k)];
    }
  } else {
    n.at("kind").fail("unknown covariance kind '" + kind + "'");
  }
  return c;
}

SignalSpec parse_signal(const Node& n, std::size_t env_index, int p) {
  n.expect_object({"kind", "variance", "base", "scale", "values"});
  SignalSpec s;
  const std::string kind = n.at("kind").string();
  if (kind == "iid-gaussian") {
    s.kind = SignalSpec::Kind::iid_gaussian;
    if (n.has("variance")) s.variance = n.at("variance").non_negative();
  } else if (kind == "shifted") {
    s.kind = SignalSpec::Kind::shifted;
    const int base = n.at("base").positive_int();
    if (static_cast<std::size_t>(base) > env_index)
      n.at("base").fail("must refer to an earlier environment (1-based)");
    s.base = base - 1;
    if (n.has("variance")) s.variance = n.at("variance").non_negative();
    if (n.has("scale")) s.shift_scale = n.at("scale").positive();
  } else if (kind == "fixed") {
    s.kind = SignalSpec::Kind::fixed;
    const auto v = n.at("values").numbers();
    if (static_cast<int>(v.size()) != p) n.at("values").fail("expected p entries");
    s.values = to_vec(v);
  } else {
    n.at("kind").fail("unknown signal kind '" + kind + "'");
  }
  return s;
}

EstimatorSpec parse_estimator(const Node& n) {
  EstimatorSpec e;
  std::string kind;
  if (n.raw().is_string()) {
    kind = n.string();
  } else {
    n.expect_object({"kind", "lambda_rt", "mu"});
    kind = n.at("kind").string();
  }
  if (kind == "stack") {
    e.kind = EstimatorKind::stack;
  } else if (kind == "average") {
    e.kind = EstimatorKind::average;
  } else if (kind == "second-step-joint") {
    e.kind = EstimatorKind::second_step_joint;
    e.penalty = SecondStepPenalty::joint(n.raw().is_object() && n.has("lambda_rt")
                                             ? n.at("lambda_rt").positive()
                                             : 0.5);
  } else if (kind == "second-step-adaptive") {
    e.kind = EstimatorKind::second_step_adaptive;
    AdaptiveWeight mu;
    if (n.raw().is_object() && n.has("mu")) {
      const Node m = n.at("mu");
      if (m.raw().is_string()) {
        if (m.string() != "default") m.fail("string form must be \"default\"");
      } else {
        m.expect_object({"x", "mu"});
        try {
          mu = AdaptiveWeight::table(m.at("x").numbers(), m.at("mu").numbers());
        } catch (const ModelError& ex) {
          m.fail(ex.what());
        }
      }
    }
    e.penalty = SecondStepPenalty::adaptive(mu);
  } else {
    n.fail("unknown estimator '" + kind + "'");
  }
  return e;
}

}  // namespace

std::string EstimatorSpec::label() const { return std::string(to_string(kind)); }

const std::vector<std::string>& sweep_parameters() {
  static const std::vector<std::string> names = {
      "lambda", "chi", "shift_variance", "noise_variance", "signal_variance", "lambda_rt", "n"};
  return names;
}

ExperimentConfig parse_config(const json& doc) {
  const Node root(doc, "");
  root.expect_object({"id", "p", "environments", "sweep", "replicates", "seed", "estimator",
                      "solver", "functional"});
  ExperimentConfig cfg;
  cfg.source = doc;
  if (root.has("id")) cfg.id = root.at("id").string();
  cfg.p = root.at("p").positive_int();

  const Node envs = root.at("environments");
  if (!envs.raw().is_array() || envs.raw().empty()) envs.fail("expected a non-empty array");
  const std::size_t E = envs.raw().size();
  for (std::size_t e = 0; e < E; ++e) {
    const Node n = envs.index(e);
    n.expect_object({"n", "covariance", "signal", "noise_variance", "weight", "lambda"});
    EnvironmentSpec s;
    s.n = n.at("n").positive_int();
    if (n.has("covariance")) s.covariance = parse_covariance(n.at("covariance"), cfg.p);
    if (n.has("signal")) s.signal = parse_signal(n.at("signal"), e, cfg.p);
    if (n.has("noise_variance")) s.noise_variance = n.at("noise_variance").non_negative();
    s.weight = n.has("weight") ? n.at("weight").non_negative() : 1.0 / static_cast<double>(E);
    if (n.has("lambda")) {
      const Node l = n.at("lambda");
      if (l.raw().is_array()) {
        const auto v = l.numbers();
        if (static_cast<int>(v.size()) != cfg.p) l.fail("expected p entries");
        for (double x : v)
          if (!(x > 0.0)) l.fail("entries must be positive");
        s.lambda_values = to_vec(v);
      } else {
        s.lambda = l.positive();
      }
    }
    cfg.environments.push_back(std::move(s));
  }
  double wsum = 0.0;
  for (const auto& s : cfg.environments) wsum += s.weight;
  if (!(wsum > 0.0)) envs.fail("at least one environment weight must be positive");

  if (root.has("sweep")) {
    const Node n = root.at("sweep");
    n.expect_object({"param", "values", "environment"});
    SweepSpec sw;
    sw.param = n.at("param").string();
    const auto& names = sweep_parameters();
    if (std::find(names.begin(), names.end(), sw.param) == names.end())
      n.at("param").fail("unknown sweep parameter '" + sw.param + "'");
    sw.values = n.at("values").numbers();
    if (n.has("environment")) {
      sw.environment = n.at("environment").positive_int();
      if (static_cast<std::size_t>(sw.environment) > E) n.at("environment").fail("no such environment");
    }
    cfg.sweep = std::move(sw);
  }
  if (root.has("replicates")) {
    const Node n = root.at("replicates");
    n.expect_object({"design", "mc"});
    if (n.has("design")) cfg.replicates.design = n.at("design").positive_int();
    if (n.has("mc")) cfg.replicates.mc = n.at("mc").positive_int();
  }
  if (root.has("seed")) {
    const Node n = root.at("seed");
    if (!n.raw().is_number_unsigned() && !(n.raw().is_number_integer() && n.raw().get<long long>() >= 0))
      n.fail("expected a non-negative integer");
    cfg.seed = n.raw().get<std::uint64_t>();
  }
  if (root.has("estimator")) {
    const Node n = root.at("estimator");
    cfg.estimators.clear();
    if (n.raw().is_array()) {
      if (n.raw().empty()) n.fail("expected at least one estimator");
      for (std::size_t i = 0; i < n.raw().size(); ++i) cfg.estimators.push_back(parse_estimator(n.index(i)));
    } else {
      cfg.estimators.push_back(parse_estimator(n));
    }
  }
  if (root.has("solver")) {
    const Node n = root.at("solver");
    n.expect_object({"damping", "tol", "max_outer", "common_random_numbers", "prox_tol"});
    if (n.has("damping")) {
      cfg.solver.damping = n.at("damping").positive();
      if (cfg.solver.damping > 1.0) n.at("damping").fail("must lie in (0, 1]");
    }
    if (n.has("tol")) cfg.solver.tol = n.at("tol").positive();
    if (n.has("max_outer")) cfg.solver.max_outer = n.at("max_outer").positive_int();
    if (n.has("common_random_numbers"))
      cfg.solver.common_random_numbers = n.at("common_random_numbers").boolean();
    if (n.has("prox_tol")) cfg.solver.prox_tol = n.at("prox_tol").positive();
  }
  if (root.has("functional")) cfg.functional = root.at("functional").string();

  // Estimators built on a common first step need a common lambda.
  for (const auto& est : cfg.estimators) {
    if (est.kind == EstimatorKind::average) continue;
    for (std::size_t e = 1; e < E; ++e) {
      const auto& a = cfg.environments[0];
      const auto& b = cfg.environments[e];
      const bool same = a.lambda_values.size() == b.lambda_values.size() &&
                        (a.lambda_values.size() ? a.lambda_values == b.lambda_values
                                                : a.lambda == b.lambda);
      if (!same)
        throw ConfigError("environments[" + std::to_string(e) +
                          "].lambda: the " + est.label() +
                          " estimator needs the same lambda in every environment");
    }
  }
  return cfg;
}

ExperimentConfig parse_config_text(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("invalid JSON: ") + e.what());
  }
  return parse_config(doc);
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config_text(ss.str());
}

ExperimentConfig apply_sweep(const ExperimentConfig& cfg, double value) {
  if (!cfg.sweep) throw ConfigError("sweep: configuration has no sweep axis");
  ExperimentConfig out = cfg;
  const SweepSpec& sw = *cfg.sweep;
  const std::size_t E = out.environments.size();
  auto selected = [&](std::size_t e) {
    return sw.environment == 0 || static_cast<std::size_t>(sw.environment) == e + 1;
  };
  bool applied = false;
  if (sw.param == "lambda") {
    if (!(value > 0.0)) throw ConfigError("sweep.values: lambda must be positive");
    for (std::size_t e = 0; e < E; ++e)
      if (selected(e)) {
        out.environments[e].lambda = value;
        out.environments[e].lambda_values = Vec();
        applied = true;
      }
  } else if (sw.param == "chi") {
    if (!(value > 0.0)) throw ConfigError("sweep.values: chi must be positive");
    for (std::size_t e = 0; e < E; ++e) {
      auto& c = out.environments[e].covariance;
      const bool target = sw.environment != 0 ? selected(e)
                                              : c.kind == CovarianceSpec::Kind::two_eigenvalue;
      if (target) {
        if (out.p % 2 != 0) throw ConfigError("sweep: chi requires even p");
        c.kind = CovarianceSpec::Kind::two_eigenvalue;
        c.chi = value;
        applied = true;
      }
    }
  } else if (sw.param == "shift_variance") {
    for (std::size_t e = 0; e < E; ++e)
      if (selected(e) && out.environments[e].signal.kind == SignalSpec::Kind::shifted) {
        out.environments[e].signal.variance = value;
        applied = true;
      }
  } else if (sw.param == "noise_variance") {
    for (std::size_t e = 0; e < E; ++e)
      if (selected(e)) {
        out.environments[e].noise_variance = value;
        applied = true;
      }
  } else if (sw.param == "signal_variance") {
    for (std::size_t e = 0; e < E; ++e)
      if (selected(e) && out.environments[e].signal.kind == SignalSpec::Kind::iid_gaussian) {
        out.environments[e].signal.variance = value;
        applied = true;
      }
  } else if (sw.param == "lambda_rt") {
    if (!(value > 0.0)) throw ConfigError("sweep.values: lambda_rt must be positive");
    for (auto& est : out.estimators)
      if (est.kind == EstimatorKind::second_step_joint) {
        est.penalty.lambda_rt = value;
        applied = true;
      }
  } else if (sw.param == "n") {
    if (!(value >= 1.0) || value != std::floor(value)) throw ConfigError("sweep.values: n must be a positive integer");
    for (std::size_t e = 0; e < E; ++e)
      if (selected(e)) {
        out.environments[e].n = static_cast<int>(value);
        applied = true;
      }
  }
  if (!applied)
    throw ConfigError("sweep.param: '" + sw.param + "' does not apply to any environment or estimator");
  if (value < 0.0) throw ConfigError("sweep.values: negative value");
  return out;
}

Vec common_lambda(const std::vector<EnvironmentModel>& models) {
  const Vec& l = models.front().lambda;
  for (const auto& m : models)
    if (m.lambda != l) throw ConfigError("environments must share lambda for this estimator");
  return l;
}

}  // namespace glamp
