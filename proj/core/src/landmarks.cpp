#include "pulsereg/landmarks.hpp"

#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <string>

#include "pulsereg/error.hpp"

namespace pulsereg {

namespace {

std::string lower_trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  s = s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  for (char& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return s;
}

}  // namespace

LandmarkSet read_landmarks(const std::filesystem::path& path, std::optional<CoordinateSpace> space, const Grid& grid) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open landmark file " + path.string());
  std::vector<Vec3> raw;
  int base = 0;
  std::string line;
  for (int line_no = 1; std::getline(is, line); ++line_no) {
    const auto where = [&] { return path.string() + ":" + std::to_string(line_no) + ": "; };
    const std::string t = lower_trim(line);
    if (t.empty()) continue;
    if (t[0] == '#') {
      const std::string body = lower_trim(t.substr(1));
      const auto colon = body.find(':');
      if (colon == std::string::npos) continue;
      const std::string key = lower_trim(body.substr(0, colon)), value = lower_trim(body.substr(colon + 1));
      if (key == "space") {
        if (value == "voxel") space = CoordinateSpace::Voxel;
        else if (value == "mm") space = CoordinateSpace::Millimeter;
        else throw IoError(where() + "space must be 'voxel' or 'mm', got '" + value + "'");
      } else if (key == "base") {
        if (value != "0" && value != "1") throw IoError(where() + "base must be 0 or 1, got '" + value + "'");
        base = value == "1" ? 1 : 0;
      }
      continue;
    }
    std::string s = t;
    for (char& c : s)
      if (c == ',' || c == '\t' || c == ';') c = ' ';
    double v[3];
    int n = 0;
    const char* p = s.data();
    const char* end = s.data() + s.size();
    while (p < end) {
      while (p < end && *p == ' ') ++p;
      if (p == end) break;
      if (n == 3) throw IoError(where() + "more than three values");
      const auto [q, ec] = std::from_chars(p, end, v[n]);
      if (ec != std::errc{} || (q < end && *q != ' ') || !std::isfinite(v[n]))
        throw IoError(where() + "malformed coordinate in '" + line + "'");
      ++n;
      p = q;
    }
    if (n != 3) throw IoError(where() + "expected 3 values, got " + std::to_string(n));
    raw.push_back({v[0], v[1], v[2]});
  }
  if (!space) throw InvalidArgument(path.string() + ": coordinate space unknown (add '# space: voxel|mm' or pass a tag)");
  LandmarkSet out;
  out.source_space = *space;
  for (const Vec3& r : raw) {
    if (*space == CoordinateSpace::Millimeter) {
      out.points.push_back(r);
    } else {
      const double b = static_cast<double>(base);
      out.points.push_back(grid.to_mm({r.x - b, r.y - b, r.z - b}));
    }
  }
  return out;
}

void write_landmarks(const std::filesystem::path& path, const std::vector<Vec3>& points_mm) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot write landmark file " + path.string());
  os << "# space: mm\n" << std::setprecision(17);
  for (const Vec3& p : points_mm) os << p.x << ' ' << p.y << ' ' << p.z << '\n';
  if (!os) throw IoError("failed writing landmark file " + path.string());
}

}  // namespace pulsereg
