#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <istream>
#include <ostream>
#include <set>

#include "mtsc/data.hpp"
#include "mtsc/errors.hpp"

namespace mtsc::data {

namespace {

std::string trim(std::string_view s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return std::string(s.substr(b, e - b));
}

std::string lower(std::string s) {
  for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i)
    if (i == s.size() || s[i] == sep) {
      out.emplace_back(s.substr(start, i - start));
      start = i + 1;
    }
  return out;
}

std::vector<std::string> words(std::string_view s) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : s) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

bool parse_bool(const std::string& word, const std::string& tag, std::size_t line) {
  std::string w = lower(word);
  if (w == "true") return true;
  if (w == "false") return false;
  throw ParseError("@" + tag + " expects true or false, got '" + word + "'", line);
}

std::size_t parse_count(const std::string& word, const std::string& tag, std::size_t line) {
  std::size_t v = 0;
  auto [ptr, ec] = std::from_chars(word.data(), word.data() + word.size(), v);
  if (ec != std::errc() || ptr != word.data() + word.size() || v == 0)
    throw ParseError("@" + tag + " expects a positive integer, got '" + word + "'", line);
  return v;
}

double parse_value(const std::string& token, std::size_t line) {
  if (token == "?") throw ParseError("missing values ('?') are not supported", line);
  std::string_view t = token;
  if (!t.empty() && t.front() == '+') t.remove_prefix(1);
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
  if (t.empty() || ec != std::errc() || ptr != t.data() + t.size())
    throw ParseError("malformed number '" + token + "'", line);
  if (!std::isfinite(v)) throw ParseError("non-finite value '" + token + "' is not supported", line);
  return v;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, ptr);
}

ParseResult parse_ts(std::istream& in) {
  ParseResult result;
  Dataset& ds = result.dataset;
  std::optional<std::size_t> declared_dims, series_length;
  bool equal_length = false, labelled = false, in_data = false;
  std::size_t data_line = 0;

  std::string raw;
  std::size_t lineno = 0;
  while (std::getline(in, raw)) {
    ++lineno;
    std::string line = trim(raw);
    if (line.empty() || line.front() == '#') continue;

    if (!in_data) {
      if (line.front() != '@') throw ParseError("expected a header tag or @data", lineno);
      auto w = words(line);
      std::string tag = lower(w[0].substr(1));
      auto arg = [&](std::size_t i) -> const std::string& {
        if (w.size() <= i) throw ParseError("@" + tag + " is missing its value", lineno);
        return w[i];
      };
      if (tag == "problemname") {
        ds.name = arg(1);
      } else if (tag == "timestamps") {
        if (parse_bool(arg(1), tag, lineno)) throw ParseError("timestamped series are not supported", lineno);
      } else if (tag == "missing") {
        parse_bool(arg(1), tag, lineno);  // '?' in the data is rejected either way
      } else if (tag == "univariate") {
        if (parse_bool(arg(1), tag, lineno)) declared_dims = 1;
      } else if (tag == "dimension" || tag == "dimensions") {
        std::size_t d = parse_count(arg(1), tag, lineno);
        if (declared_dims && *declared_dims != d)
          throw StructureError("@dimensions " + std::to_string(d) + " contradicts @univariate true", lineno);
        declared_dims = d;
      } else if (tag == "equallength") {
        equal_length = parse_bool(arg(1), tag, lineno);
      } else if (tag == "serieslength") {
        series_length = parse_count(arg(1), tag, lineno);
      } else if (tag == "classlabel") {
        if (!parse_bool(arg(1), tag, lineno)) throw StructureError("unlabelled data (@classLabel false) is not supported", lineno);
        std::set<std::string> seen;
        for (std::size_t i = 2; i < w.size(); ++i) {
          if (!seen.insert(w[i]).second) throw ParseError("duplicate class label '" + w[i] + "'", lineno);
          ds.class_names.push_back(w[i]);
        }
        if (ds.class_names.empty()) throw ParseError("@classLabel true lists no labels", lineno);
        labelled = true;
      } else if (tag == "targetlabel") {
        throw ParseError("regression targets (@targetLabel) are not supported", lineno);
      } else if (tag == "data") {
        if (!labelled) throw StructureError("@data reached without a @classLabel declaration", lineno);
        in_data = true;
        data_line = lineno;
      } else {
        result.warnings.push_back("line " + std::to_string(lineno) + ": ignoring unknown header tag " + w[0]);
      }
      continue;
    }

    auto fields = split(line, ':');
    if (fields.size() < 2) throw ParseError("data line needs at least one dimension and a class label", lineno);
    const std::string label = trim(fields.back());
    fields.pop_back();
    const std::size_t d = fields.size();
    if (!declared_dims) declared_dims = d;
    if (d != *declared_dims)
      throw StructureError("expected " + std::to_string(*declared_dims) + " dimensions, found " + std::to_string(d),
                           lineno);

    Sample s;
    for (std::size_t k = 0; k < d; ++k) {
      std::string field = trim(fields[k]);
      if (field.empty()) throw ParseError("dimension " + std::to_string(k + 1) + " is empty", lineno);
      auto tokens = split(field, ',');
      if (k == 0) s.length = tokens.size();
      if (tokens.size() != s.length)
        throw StructureError("dimension " + std::to_string(k + 1) + " has " + std::to_string(tokens.size()) +
                                 " values but dimension 1 has " + std::to_string(s.length),
                             lineno);
      for (const auto& tok : tokens) s.values.push_back(parse_value(trim(tok), lineno));
    }
    if (equal_length && !ds.samples.empty() && s.length != ds.samples.front().length)
      throw StructureError("@equalLength true but series has length " + std::to_string(s.length), lineno);
    if (equal_length && series_length && s.length != *series_length)
      throw StructureError("series length " + std::to_string(s.length) + " differs from @seriesLength " +
                               std::to_string(*series_length),
                           lineno);
    auto it = std::find(ds.class_names.begin(), ds.class_names.end(), label);
    if (it == ds.class_names.end()) throw LabelError("class label '" + label + "' was not declared", lineno);
    s.label = static_cast<std::size_t>(it - ds.class_names.begin());
    s.original_length = s.length;
    ds.samples.push_back(std::move(s));
  }
  if (!in_data) throw StructureError("no @data section", 0);
  if (ds.samples.empty()) throw StructureError("@data section holds no series", data_line);
  ds.dims = *declared_dims;
  return result;
}

ParseResult parse_ts_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset file '" + path + "'");
  return parse_ts(in);
}

void write_ts(std::ostream& out, const Dataset& ds) {
  ds.validate();
  for (const auto& c : ds.class_names)
    if (c.empty() || std::any_of(c.begin(), c.end(), [](char ch) { return std::isspace(static_cast<unsigned char>(ch)) || ch == ':'; }))
      throw UsageError("class label '" + c + "' cannot be written to a .ts file");
  const bool equal = ds.equal_length();
  out << "@problemName " << (ds.name.empty() ? "unnamed" : ds.name) << '\n'
      << "@timeStamps false\n"
      << "@missing false\n"
      << "@univariate " << (ds.dims == 1 ? "true" : "false") << '\n'
      << "@dimensions " << ds.dims << '\n'
      << "@equalLength " << (equal ? "true" : "false") << '\n';
  if (equal) out << "@seriesLength " << ds.max_length() << '\n';
  out << "@classLabel true";
  for (const auto& c : ds.class_names) out << ' ' << c;
  out << "\n@data\n";
  for (const auto& s : ds.samples) {
    for (std::size_t k = 0; k < ds.dims; ++k) {
      for (std::size_t t = 0; t < s.length; ++t) out << (t ? "," : "") << format_double(s.at(k, t));
      out << ':';
    }
    out << ds.class_names[s.label] << '\n';
  }
}

void write_ts_file(const std::string& path, const Dataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write dataset file '" + path + "'");
  write_ts(out, ds);
  if (!out) throw IoError("failed writing dataset file '" + path + "'");
}

}  // namespace mtsc::data
