#include "doctest.h"

#include "cli.hpp"
#include "support.hpp"

#include "journeykv/repository.hpp"

#include <fstream>
#include <sstream>

namespace {

struct Run {
  int code = 0;
  std::string out;
  std::string err;
};

Run call(std::vector<std::string> args) {
  args.insert(args.begin(), "jkv");
  std::vector<const char*> argv;
  for (const std::string& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  const int code = jkv::cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("bad invocations exit with 2") {
  CHECK(call({}).code == 2);
  CHECK(call({"frobnicate"}).code == 2);
  CHECK(call({"rope-check", "--no-such-flag"}).code == 2);
  CHECK(call({"--help"}).code == 0);
}

TEST_CASE("rope-check reports a tiny gap") {
  const Run r = call({"rope-check", "--dim", "32", "--positions", "128", "--draws", "200"});
  CHECK(r.code == 0);
  const auto at = r.out.find("max_gap");
  REQUIRE(at != std::string::npos);
  std::istringstream tail(r.out.substr(at + 7));
  char sep = 0;
  double gap = 1.0;
  tail >> sep >> gap;
  CHECK(gap <= 1e-9);
}

TEST_CASE("gen-data, validate and repository round trip") {
  const auto dir = jkv::test::scratch_dir("cli");
  const std::string a = (dir / "a.jsonl").string(), b = (dir / "b.jsonl").string();
  REQUIRE(call({"gen-data", "--seed", "7", "--out", a}).code == 0);
  REQUIRE(call({"gen-data", "--seed", "7", "--out", b}).code == 0);
  CHECK(slurp(a) == slurp(b));
  CHECK(slurp(a + ".heldout") == slurp(b + ".heldout"));
  const Run valid = call({"validate", "--corpus", a});
  CHECK(valid.code == 0);
  CHECK(valid.out.find("0 violations") != std::string::npos);
  {
    std::ofstream broken(dir / "broken.jsonl");
    broken << "{\"kind\":\"triple\",\"h\":\"A\"}\n";
  }
  CHECK(call({"validate", "--corpus", (dir / "broken.jsonl").string()}).code == 1);

  const std::string repo = (dir / "r.jrkv").string();
  REQUIRE(call({"repo-build", "--corpus", a, "--out", repo, "--centroids", "4"}).code == 0);
  const Run query = call({"repo-query", "--repo", repo, "--k", "3", "--probes", "2"});
  CHECK(query.code == 0);
  CHECK(std::count(query.out.begin(), query.out.end(), '\n') == 4);

  jkv::persist(jkv::Repository(32, 32), dir / "empty.jrkv");
  const Run empty = call({"repo-query", "--repo", (dir / "empty.jrkv").string(), "--k", "5"});
  CHECK(empty.code == 0);
  CHECK(empty.out == "rank,index,score,slot,instance,token\n");

  CHECK(call({"repo-query", "--repo", (dir / "missing.jrkv").string()}).code == 1);
  std::filesystem::remove_all(dir);
}
