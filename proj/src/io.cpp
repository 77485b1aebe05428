#include "sivi/io.hpp"

#include <json.hpp>

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace sivi::io {

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> out;
  std::string cell;
  std::istringstream in(line);
  while (std::getline(in, cell, ',')) out.push_back(cell);
  if (!line.empty() && line.back() == ',') out.emplace_back();
  return out;
}

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  const auto e = s.find_last_not_of(" \t\r");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

double parse_double(const std::string& path, long line, const std::string& cell) {
  const std::string t = trim(cell);
  double v = 0.0;
  const auto res = std::from_chars(t.data(), t.data() + t.size(), v);
  if (res.ec != std::errc() || res.ptr != t.data() + t.size() || t.empty())
    throw ParseError(path, line, "cannot parse number '" + t + "'");
  return v;
}

std::ofstream open_out(const std::string& path) {
  const std::filesystem::path parent = std::filesystem::path(path).parent_path();
  std::error_code ec;
  if (!parent.empty()) std::filesystem::create_directories(parent, ec);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write '" + path + "'");
  return out;
}

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<double>> rows;
};

Table read_table(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  Table t;
  std::string line;
  long lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (t.header.empty()) {
      for (auto& c : cells) t.header.push_back(trim(c));
      continue;
    }
    if (cells.size() != t.header.size())
      throw ParseError(path, lineno,
                       "expected " + std::to_string(t.header.size()) + " fields, found " +
                           std::to_string(cells.size()));
    std::vector<double> row;
    row.reserve(cells.size());
    for (const auto& c : cells) row.push_back(parse_double(path, lineno, c));
    t.rows.push_back(std::move(row));
  }
  if (t.header.empty()) throw ParseError(path, 1, "missing header");
  return t;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::scientific, 16);
  return std::string(buf, res.ptr);
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const std::string& path, const std::string& contents) {
  auto out = open_out(path);
  out << contents;
  if (!out) throw std::runtime_error("failed writing '" + path + "'");
}

void write_dataset(const std::string& path, const SpatialDataset& d) {
  auto out = open_out(path);
  out << "s1,s2";
  for (Index k = 1; k < d.X.cols(); ++k) out << ",x" << k;
  out << ",y\n";
  for (Index i = 0; i < d.size(); ++i) {
    out << format_double(d.coords(i, 0)) << ',' << format_double(d.coords(i, 1));
    for (Index k = 1; k < d.X.cols(); ++k) out << ',' << format_double(d.X(i, k));
    out << ',' << format_double(d.y(i)) << '\n';
  }
}

SpatialDataset read_dataset(const std::string& path) {
  const Table t = read_table(path);
  const auto& h = t.header;
  if (h.size() < 3 || h[0] != "s1" || h[1] != "s2" || h.back() != "y")
    throw ParseError(path, 1, "header must be s1,s2,x1,...,xp,y");
  const Index p = static_cast<Index>(h.size()) - 3;
  for (Index k = 0; k < p; ++k)
    if (h[static_cast<std::size_t>(k + 2)] != "x" + std::to_string(k + 1))
      throw ParseError(path, 1, "expected column x" + std::to_string(k + 1));
  const Index n = static_cast<Index>(t.rows.size());
  if (n == 0) throw ParseError(path, 2, "no data rows");
  SpatialDataset d;
  d.coords.resize(n, 2);
  d.X.resize(n, p + 1);
  d.y.resize(n);
  for (Index i = 0; i < n; ++i) {
    const auto& r = t.rows[static_cast<std::size_t>(i)];
    d.coords(i, 0) = r[0];
    d.coords(i, 1) = r[1];
    d.X(i, 0) = 1.0;
    for (Index k = 0; k < p; ++k) d.X(i, k + 1) = r[static_cast<std::size_t>(k + 2)];
    d.y(i) = r.back();
  }
  return d;
}

void write_truth(const std::string& path, const ThetaSample& t) {
  nlohmann::ordered_json j;
  j["beta"] = std::vector<double>(t.beta.data(), t.beta.data() + t.beta.size());
  j["sigma2"] = t.sigma2;
  j["tau2"] = t.tau2 ? nlohmann::ordered_json(*t.tau2) : nlohmann::ordered_json(nullptr);
  j["phi"] = t.phi;
  if (t.w) j["w"] = std::vector<double>(t.w->data(), t.w->data() + t.w->size());
  write_file(path, j.dump(2) + "\n");
}

ThetaSample read_truth(const std::string& path) {
  const auto j = nlohmann::json::parse(read_file(path));
  ThetaSample t;
  const auto beta = j.at("beta").get<std::vector<double>>();
  t.beta = Eigen::Map<const Eigen::VectorXd>(beta.data(), static_cast<Index>(beta.size()));
  t.sigma2 = j.at("sigma2").get<double>();
  if (!j.at("tau2").is_null()) t.tau2 = j.at("tau2").get<double>();
  t.phi = j.at("phi").get<double>();
  if (j.contains("w")) {
    const auto w = j.at("w").get<std::vector<double>>();
    t.w = Eigen::Map<const Eigen::VectorXd>(w.data(), static_cast<Index>(w.size()));
  }
  return t;
}

void write_trace(const std::string& path, const std::vector<TraceRow>& trace) {
  auto out = open_out(path);
  out << "iteration,elbo,wall_ms\n";
  for (const auto& r : trace)
    out << r.iteration << ',' << format_double(r.elbo) << ',' << format_double(r.wall_ms) << '\n';
}

void write_prediction_summary(const std::string& path, const Eigen::MatrixXd& coords,
                              const PredictiveDraws& d) {
  auto out = open_out(path);
  out << "s1,s2,mean,sd,q025,q975\n";
  const double m = static_cast<double>(d.draws());
  for (Index i = 0; i < d.locations(); ++i) {
    const Eigen::VectorXd row = d.y.row(i).transpose();
    const double mean = row.mean();
    const double sd = m > 1 ? std::sqrt((row.array() - mean).square().sum() / (m - 1.0)) : 0.0;
    out << format_double(coords(i, 0)) << ',' << format_double(coords(i, 1)) << ','
        << format_double(mean) << ',' << format_double(sd) << ','
        << format_double(empirical_quantile(row, 0.025)) << ','
        << format_double(empirical_quantile(row, 0.975)) << '\n';
  }
}

void write_draws(const std::string& path, const PredictiveDraws& d) {
  auto out = open_out(path);
  const bool poisson = d.family == Family::Poisson;
  out << (poisson ? "location,draw,y,lambda\n" : "location,draw,y,mean,var\n");
  out << "# family=" << to_string(d.family) << '\n';
  for (Index i = 0; i < d.locations(); ++i)
    for (Index j = 0; j < d.draws(); ++j) {
      out << (i + 1) << ',' << (j + 1) << ',' << format_double(d.y(i, j)) << ','
          << format_double(d.mean(i, j));
      if (!poisson) out << ',' << format_double(d.var(i, j));
      out << '\n';
    }
}

PredictiveDraws read_draws(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path + "'");
  std::string header, family_line, line;
  std::getline(in, header);
  std::getline(in, family_line);
  header = trim(header);
  family_line = trim(family_line);
  const std::string tag = "# family=";
  if (family_line.rfind(tag, 0) != 0) throw ParseError(path, 2, "missing family line");
  PredictiveDraws d;
  d.family = parse_family(family_line.substr(tag.size()));
  const bool poisson = d.family == Family::Poisson;
  const std::string expected = poisson ? "location,draw,y,lambda" : "location,draw,y,mean,var";
  if (header != expected) throw ParseError(path, 1, "header must be " + expected);
  const std::size_t width = poisson ? 4 : 5;
  std::vector<std::vector<double>> rows;
  long lineno = 2;
  Index L = 0, m = 0;
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty()) continue;
    auto cells = split_csv(line);
    if (cells.size() != width) throw ParseError(path, lineno, "wrong field count");
    std::vector<double> r;
    for (const auto& c : cells) r.push_back(parse_double(path, lineno, c));
    L = std::max(L, static_cast<Index>(r[0]));
    m = std::max(m, static_cast<Index>(r[1]));
    rows.push_back(std::move(r));
  }
  if (static_cast<Index>(rows.size()) != L * m) throw ParseError(path, lineno, "incomplete draw grid");
  d.y.resize(L, m);
  d.mean.resize(L, m);
  if (!poisson) d.var.resize(L, m);
  for (const auto& r : rows) {
    const auto i = static_cast<Index>(r[0]) - 1, j = static_cast<Index>(r[1]) - 1;
    d.y(i, j) = r[2];
    d.mean(i, j) = r[3];
    if (!poisson) d.var(i, j) = r[4];
  }
  return d;
}

void write_scores(const std::string& path, const ScoreReport& r) {
  auto out = open_out(path);
  out << "location,y,point,crps,interval_score,nlpd\n";
  for (Index i = 0; i < r.count(); ++i)
    out << (i + 1) << ',' << format_double(r.y(i)) << ',' << format_double(r.point(i)) << ','
        << format_double(r.crps(i)) << ',' << format_double(r.interval(i)) << ','
        << format_double(r.nlpd(i)) << '\n';
  out << "mean,," << "," << format_double(r.mean_crps) << ',' << format_double(r.mean_interval)
      << ',' << format_double(r.mean_nlpd) << '\n';
}

std::string score_summary_json(const ScoreReport& r) {
  nlohmann::ordered_json j;
  j["count"] = r.count();
  j["alpha"] = r.alpha;
  j["crps"] = r.mean_crps;
  j["interval_score"] = r.mean_interval;
  j["nlpd"] = r.mean_nlpd;
  j["rmse"] = r.rmse;
  j["nlpd_floored"] = r.nlpd_floored;
  return j.dump(2) + "\n";
}

std::string hash_bytes(const std::string& bytes) {
  std::uint64_t h = 14695981039346656037ULL;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::string file_hash(const std::string& path) { return hash_bytes(read_file(path)); }

}  // namespace sivi::io
