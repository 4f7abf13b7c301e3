// Acceptance suite: prints one PASS/FAIL line per criterion.
//   acceptance [--only 1,3] [--expect-fail 8] [--quiet]
// Exit status is 0 when the set of failing criteria equals --expect-fail.

#include <cstdio>
#include <cstring>
#include <set>
#include <string>

#include "m4fuse/testing/acceptance.hpp"

namespace {
std::set<int> parse_ids(const char* s) {
  std::set<int> out;
  for (const auto& p : m4fuse::detail::split(s, ','))
    if (!p.empty()) out.insert(std::stoi(p));
  return out;
}
}  // namespace

int main(int argc, char** argv) {
  using namespace m4fuse;
  acceptance::Options opt;
  std::set<int> expected;
  bool quiet = false;
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--only") && i + 1 < argc) opt.only = parse_ids(argv[++i]);
    else if (!std::strcmp(argv[i], "--expect-fail") && i + 1 < argc) expected = parse_ids(argv[++i]);
    else if (!std::strcmp(argv[i], "--quiet")) quiet = true;
    else {
      std::fprintf(stderr, "usage: %s [--only ids] [--expect-fail ids] [--quiet]\n", argv[0]);
      return 2;
    }
  }
  if (!quiet) opt.progress = [](const std::string& s) { std::fprintf(stderr, "%s\n", s.c_str()); };

  std::set<int> failed;
  const auto results = acceptance::run_acceptance(opt, [&](const acceptance::Result& r) {
    std::printf("%s\n", acceptance::format(r).c_str());
    std::fflush(stdout);
    if (!r.pass) failed.insert(r.id);
  });
  std::printf("%zu run, %zu passed, %zu failed", results.size(), results.size() - failed.size(), failed.size());
  if (!expected.empty()) {
    std::printf(" (expected failures:");
    for (int id : expected) std::printf(" %d", id);
    std::printf(")");
  }
  std::printf("\n");
  return failed == expected ? 0 : 1;
}
