#include "tsode/csvio.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "tsode/faults.hpp"

namespace tsode::csvio {

std::string fmt(double x) {
  char buf[40];
  // %.17g round-trips but prints noise; try ascending precision.
  for (int prec = 6; prec <= 17; ++prec) {
    std::snprintf(buf, sizeof buf, "%.*g", prec, x);
    double back = std::strtod(buf, nullptr);
    if (back == x) break;
  }
  return buf;
}

std::string fmt(long x) { return std::to_string(x); }
std::string fmt(int x) { return std::to_string(x); }

std::vector<std::string> split_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

int Table::col(const std::string& name) const {
  for (size_t i = 0; i < header.size(); ++i)
    if (header[i] == name) return static_cast<int>(i);
  return -1;
}

Table read_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigFault("cannot open csv: " + path);
  Table t;
  std::string line;
  if (std::getline(in, line)) t.header = split_line(line);
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    t.rows.push_back(split_line(line));
  }
  return t;
}

void write_csv(const std::string& path, const Table& t) {
  std::ostringstream os;
  for (size_t i = 0; i < t.header.size(); ++i) {
    if (i) os << ',';
    os << t.header[i];
  }
  os << '\n';
  for (const auto& row : t.rows) {
    for (size_t i = 0; i < row.size(); ++i) {
      if (i) os << ',';
      os << row[i];
    }
    os << '\n';
  }
  write_text_file(path, os.str());
}

void write_text_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigFault("cannot write file: " + path);
  out.write(content.data(), static_cast<std::streamsize>(content.size()));
  if (!out) throw ConfigFault("short write: " + path);
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigFault("cannot open file: " + path);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

}  // namespace tsode::csvio
