#pragma once
#include <string>
#include <vector>

namespace tsode::csvio {

// Shortest round-trippable decimal form; stable across runs and platforms.
std::string fmt(double x);
std::string fmt(long x);
std::string fmt(int x);

std::vector<std::string> split_line(const std::string& line);

struct Table {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;
  int col(const std::string& name) const;  // -1 if absent
};

Table read_csv(const std::string& path);
void write_csv(const std::string& path, const Table& t);

void write_text_file(const std::string& path, const std::string& content);
std::string read_text_file(const std::string& path);

}  // namespace tsode::csvio
