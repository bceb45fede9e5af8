/*
 * Copyright (C) 2026 The DSRC-ATL Authors.
 *
 * Licensed under the Apache License, Version 2.0 (the "License"); you may not
 * use this file except in compliance with the License. You may obtain a copy of
 * the License at
 *
 * http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS, WITHOUT
 * WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied. See the
 * License for the specific language governing permissions and limitations under
 * the License.
 */

#include <gtest/gtest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <tuple>

#include "dsrc_atl/cli.hpp"

namespace fs = std::filesystem;
using namespace dsrc_atl;

namespace
{

struct Invocation
{
  int code = -1;
  std::string out, err;
};

Invocation invoke(std::vector<std::string> args)
{
  args.insert(args.begin(), "dsrc_atl");
  std::vector<const char*> argv;
  for (const auto& a : args) argv.push_back(a.c_str());
  std::ostringstream out, err;
  Invocation r;
  r.code = cli::run(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::string slurp(const fs::path& p)
{
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<std::string> lines_of(const std::string& text)
{
  std::vector<std::string> out;
  std::istringstream in(text);
  for (std::string l; std::getline(in, l);) out.push_back(l);
  return out;
}

class Cli : public ::testing::Test
{
protected:
  void SetUp() override
  {
    dir_ = fs::temp_directory_path() /
           ("dsrc_atl_cli_" + std::to_string(::getpid()) + "_" +
            ::testing::UnitTest::GetInstance()->current_test_info()->name());
    fs::remove_all(dir_);
    fs::create_directories(dir_);
  }
  void TearDown() override { fs::remove_all(dir_); }

  std::string path(const std::string& name) const { return (dir_ / name).string(); }

  std::string write(const std::string& name, const std::string& text) const
  {
    std::ofstream(path(name)) << text;
    return path(name);
  }

  fs::path dir_;
};

const std::vector<std::string> kShort = {"--duration", "400", "--warmup", "60"};

std::vector<std::string> with(std::vector<std::string> a, const std::vector<std::string>& b)
{
  a.insert(a.end(), b.begin(), b.end());
  return a;
}

}  // namespace

TEST_F(Cli, SimulateWritesCsvAndSummary)
{
  const auto r = invoke(with({"simulate", "--controller", "atl", "--penetration", "0.5", "--seed", "4", "--replications",
                           "3", "--out", path("run.csv")},
                          kShort));
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(slurp(path("run.csv")));
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[0], "seed,controller,penetration,mean_wait_all_s,mean_wait_equipped_s,mean_wait_unequipped_s,"
                     "vehicles_completed,vehicles_generated");
  EXPECT_EQ(rows[1].rfind("4,atl,0.500,", 0), 0u);
  EXPECT_EQ(rows[3].rfind("6,atl,", 0), 0u);

  const auto summary = nlohmann::json::parse(slurp(path("run.summary.json")));
  EXPECT_EQ(summary["seeds"], nlohmann::json({4, 5, 6}));
  EXPECT_EQ(summary["runs"].size(), 3u);
  EXPECT_EQ(summary["controller"], "atl");
}

TEST_F(Cli, SimulateIsByteIdenticalOnRerun)
{
  const auto args = with({"simulate", "--penetration", "0.3", "--seed", "8"}, kShort);
  const auto a = invoke(with(args, {"--out", path("a.csv"), "--trace-out", path("a.trace")}));
  const auto b = invoke(with(args, {"--out", path("b.csv"), "--trace-out", path("b.trace")}));
  ASSERT_EQ(a.code, 0) << a.err;
  ASSERT_EQ(b.code, 0) << b.err;
  EXPECT_EQ(slurp(path("a.csv")), slurp(path("b.csv")));
  EXPECT_EQ(slurp(path("a.trace")), slurp(path("b.trace")));
  EXPECT_EQ(slurp(path("a.summary.json")), slurp(path("b.summary.json")));
  EXPECT_FALSE(slurp(path("a.trace")).empty());
}

TEST_F(Cli, AtlWithoutEquippedVehiclesMatchesPretimed)
{
  const auto atl = invoke(with({"simulate", "--controller", "atl", "--penetration", "0", "--seed", "2"}, kShort));
  const auto tl = invoke(with({"simulate", "--controller", "pretimed", "--penetration", "0", "--seed", "2"}, kShort));
  ASSERT_EQ(atl.code, 0);
  ASSERT_EQ(tl.code, 0);
  const auto a = lines_of(atl.out).at(1);
  const auto t = lines_of(tl.out).at(1);
  EXPECT_EQ(a.substr(a.find(",0.000,")), t.substr(t.find(",0.000,")));
}

TEST_F(Cli, DegenerateSplitRatioIsAConfigError)
{
  const auto demand = write("demand.json", R"({"total_flow_vph": 1500, "split_ratio": "4:0"})");
  const auto r = invoke({"simulate", "--demand", demand});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("split_ratio"), std::string::npos) << r.err;
}

TEST_F(Cli, ConfigErrorsNameTheField)
{
  const std::tuple<std::string, std::string, std::string> cases[] = {
      {"timing", R"({"min_green_s": -1})", "timing"},
      {"channel", R"({"tx_period_s": 0})", "channel"},
      {"dynamics", R"({"dt_s": 0})", "dt_s"},
  };
  for (const auto& [option, json, field] : cases) {
    const auto file = write(option + ".json", json);
    const auto r = invoke({"simulate", "--" + option, file});
    EXPECT_EQ(r.code, 2) << option;
    EXPECT_NE(r.err.find(field), std::string::npos) << r.err;
  }
  EXPECT_EQ(invoke({"simulate", "--timing", path("missing.json")}).code, 2);
  EXPECT_EQ(invoke({"simulate", "--controller", "smart"}).code, 2);
  EXPECT_EQ(invoke({"simulate", "--penetration", "1.5"}).code, 2);
  EXPECT_EQ(invoke({"simulate", "--bogus"}).code, 2);
  EXPECT_EQ(invoke({}).code, 2);
}

TEST_F(Cli, HelpExitsCleanly)
{
  const auto r = invoke({"--help"});
  EXPECT_EQ(r.code, 0);
  for (const char* sub : {"simulate", "sweep", "channel", "rsu", "replay"}) {
    EXPECT_NE(r.out.find(sub), std::string::npos) << sub;
  }
  EXPECT_EQ(invoke({"sweep", "--help"}).code, 0);
}

TEST_F(Cli, SweepRowsAggregateAndSummary)
{
  const auto r = invoke(with({"sweep", "--penetrations", "0,0.2,1", "--seeds", "1,2", "--out", path("sweep.csv")},
                          kShort));
  ASSERT_EQ(r.code, 0) << r.err;
  // three controllers at three penetrations for two seeds
  EXPECT_EQ(lines_of(slurp(path("sweep.csv"))).size(), 1u + 3 * 3 * 2);
  EXPECT_EQ(lines_of(slurp(path("sweep.aggregate.csv"))).size(), 1u + 3 * 3);

  const auto s = nlohmann::json::parse(slurp(path("sweep.summary.json")));
  ASSERT_TRUE(s.contains("improvement_fraction_at_0_2"));
  EXPECT_TRUE(s["improvement_fraction_at_0_2"].is_number());
  EXPECT_DOUBLE_EQ(s["improvement_fraction"]["0.000"].get<double>(), 0.0);
  EXPECT_DOUBLE_EQ(s["improvement_fraction"]["1.000"].get<double>(), 1.0);
}

TEST_F(Cli, ChannelCurve)
{
  const auto r = invoke({"channel", "--distances", "25,100,150", "--samples", "2000", "--seed", "3"});
  ASSERT_EQ(r.code, 0) << r.err;
  const auto rows = lines_of(r.out);
  ASSERT_EQ(rows.size(), 4u);
  EXPECT_EQ(rows[1].rfind("25", 0), 0u);
  EXPECT_EQ(rows[3].rfind("150", 0), 0u);
  EXPECT_EQ(invoke({"channel", "--samples", "0"}).code, 2);
}

TEST_F(Cli, ExportedBsmTraceReadsBack)
{
  const auto r = invoke({"simulate", "--penetration", "1", "--duration", "60", "--warmup", "0", "--seed", "1",
                      "--bsm-trace", path("bsm.trace")});
  ASSERT_EQ(r.code, 0) << r.err;
  std::ifstream in(path("bsm.trace"));
  const auto lines = read_bsm_trace(in);
  ASSERT_FALSE(lines.empty());
  for (const auto& l : lines) EXPECT_TRUE(std::holds_alternative<BasicSafetyMessage>(decode_bsm(l.bytes)));
  EXPECT_EQ(invoke({"simulate", "--seeds", "1,2", "--bsm-trace", path("x.trace")}).code, 2);
}

TEST_F(Cli, ReplayEmptyTraceAndCorruptLine)
{
  const auto empty = write("empty.trace", "# nothing\n");
  const auto ok = invoke({"replay", "--trace", empty, "--endpoint", "127.0.0.1:9"});
  EXPECT_EQ(ok.code, 0) << ok.err;
  EXPECT_NE(ok.err.find("sent 0"), std::string::npos);

  const auto bad = write("bad.trace", "0 b501\n10 b5zz\n");
  const auto r = invoke({"replay", "--trace", bad});
  EXPECT_EQ(r.code, 2);
  EXPECT_NE(r.err.find("line 2"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"replay"}).code, 2);
  EXPECT_EQ(invoke({"replay", "--trace", path("missing")}).code, 2);
}

TEST_F(Cli, RsuRunsForAShortWhile)
{
  const auto r = invoke({"rsu", "--listen", "127.0.0.1:0", "--run-for", "0.5", "--stats-interval", "0.2"});
  EXPECT_EQ(r.code, 0) << r.err;
  EXPECT_EQ(lines_of(r.out).at(0), "PHASE 1 0");
  EXPECT_NE(r.err.find("STATS received=0 malformed=0"), std::string::npos) << r.err;
  EXPECT_EQ(invoke({"rsu", "--tcb", "bad"}).code, 2);
}

TEST_F(Cli, ProcessExitCodes)
{
  auto status = [](const std::string& args) {
    const int s = std::system((std::string(DSRC_ATL_TOOL) + " " + args + " >/dev/null 2>&1").c_str());
    return WIFEXITED(s) ? WEXITSTATUS(s) : -1;
  };
  EXPECT_EQ(status("--help"), 0);
  EXPECT_EQ(status("simulate --duration 200 --warmup 0 --out " + path("p.csv")), 0);
  EXPECT_EQ(status("simulate --demand " + write("d.json", R"({"split_ratio": "4:0"})")), 2);
  EXPECT_EQ(status("simulate --out /nonexistent-dir/x.csv --duration 10 --warmup 0"), 1);
}
