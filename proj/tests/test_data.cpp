#include <gtest/gtest.h>

#include <fstream>

#include "mrff/data.hpp"
#include "support.hpp"

using namespace mrff;
using mrff::testing::TempDir;

namespace {

std::filesystem::path write_file(const TempDir& dir, const std::string& name, const std::string& text) {
  const auto p = dir.path() / name;
  std::ofstream(p) << text;
  return p;
}

std::string load_error(const std::filesystem::path& p, const Schema& s = {}) {
  try {
    load_interactions(p, s);
  } catch (const LoadError& e) {
    return e.what();
  }
  return "";
}

// u1: clicks at t=1,3,5,7 with a non-click at t=6.
const char* kLog =
    "user_id,item_id,timestamp,label,genre\n"
    "u1,a,1,1,x\n"
    "u1,b,3,1,y\n"
    "u1,c,5,1,x\n"
    "u1,d,6,0,y\n"
    "u1,e,7,1,x\n"
    "u2,a,2,1,x\n"
    "u2,b,4,0,y\n";

}  // namespace

TEST(Loader, RemapsIdsInFirstSeenOrder) {
  TempDir dir("data");
  Schema s;
  s.attributes = {"genre"};
  const auto log = load_interactions(write_file(dir, "log.csv", kLog), s);
  EXPECT_EQ(log.records.size(), 7u);
  EXPECT_EQ(log.users.size(), 2u);
  EXPECT_EQ(log.items.decode(3), "d");
  EXPECT_EQ(log.attr_vocab(), (std::vector<std::size_t>{5, 2}));
  EXPECT_EQ(log.item_features(1), (std::vector<std::int64_t>{1, 1}));
}

TEST(Loader, TabDelimiterDetected) {
  TempDir dir("data");
  const auto log = load_interactions(write_file(dir, "log.tsv", "user_id\titem_id\ttimestamp\tlabel\nu\ti\t1\t1\n"), {});
  EXPECT_EQ(log.records.size(), 1u);
}

TEST(Loader, ErrorsNameFileAndLine) {
  TempDir dir("data");
  const auto bad_label = write_file(dir, "a.csv", "user_id,item_id,timestamp,label\nu,i,1,1\nu,i,2,3\n");
  EXPECT_NE(load_error(bad_label).find("a.csv:3"), std::string::npos);
  const auto bad_time = write_file(dir, "b.csv", "user_id,item_id,timestamp,label\nu,i,x,1\n");
  EXPECT_NE(load_error(bad_time).find("b.csv:2"), std::string::npos);
  const auto missing = write_file(dir, "c.csv", "user_id,item_id,label\nu,i,1\n");
  EXPECT_NE(load_error(missing).find("timestamp"), std::string::npos);
  const auto ragged = write_file(dir, "d.csv", "user_id,item_id,timestamp,label\nu,i,1\n");
  EXPECT_NE(load_error(ragged).find("d.csv:2"), std::string::npos);
  EXPECT_NE(load_error(dir.path() / "nope.csv").find("nope.csv"), std::string::npos);
}

TEST(Loader, InconsistentItemAttributesRejected) {
  TempDir dir("data");
  Schema s;
  s.attributes = {"genre"};
  const auto p = write_file(dir, "a.csv", "user_id,item_id,timestamp,label,genre\nu,i,1,1,x\nu,i,2,1,y\n");
  EXPECT_NE(load_error(p, s).find("a.csv:3"), std::string::npos);
}

TEST(Split, LeaveOneOutByPositives) {
  TempDir dir("data");
  const auto log = load_interactions(write_file(dir, "log.csv", kLog), Schema{.attributes = {"genre"}});
  const auto split = leave_one_out_split(log);
  const auto& u1 = split.users[0];
  auto items = [&](const std::vector<std::size_t>& idx) {
    std::vector<std::string> out;
    for (auto r : idx) out.push_back(log.items.decode(log.records[r].item));
    return out;
  };
  EXPECT_FALSE(u1.train_only);
  EXPECT_EQ(items(u1.train), (std::vector<std::string>{"a", "b"}));
  EXPECT_EQ(items(u1.val), (std::vector<std::string>{"c"}));
  EXPECT_EQ(items(u1.test), (std::vector<std::string>{"d", "e"}));
  EXPECT_TRUE(split.users[1].train_only);
  EXPECT_EQ(split.users[1].train.size(), 2u);
}

TEST(Sequences, HistoryIsEarlierClicksLeftPadded) {
  TempDir dir("data");
  const auto log = load_interactions(write_file(dir, "log.csv", kLog), Schema{.attributes = {"genre"}});
  const auto seqs = build_sequences(log, leave_one_out_split(log), 2);
  const auto& test = seqs[0].test;
  ASSERT_EQ(test.size(), 2u);
  // d at t=6: clicks a, b, c before it; most recent two kept.
  EXPECT_EQ(test[0].history, (std::vector<std::int64_t>{1, 2}));
  EXPECT_EQ(test[0].label, 0);
  EXPECT_EQ(test[1].history, (std::vector<std::int64_t>{1, 2}));
  const auto& first = seqs[0].train[0];
  EXPECT_EQ(first.history, (std::vector<std::int64_t>{kPadItem, kPadItem}));
  EXPECT_FALSE(first.has_history());
  const auto& second = seqs[0].train[1];
  EXPECT_EQ(second.history, (std::vector<std::int64_t>{kPadItem, 0}));
  EXPECT_EQ(second.mask, (std::vector<std::uint8_t>{0, 1}));
}

TEST(Sequences, SameTimestampIsNotHistory) {
  TempDir dir("data");
  const auto p = write_file(dir, "a.csv", "user_id,item_id,timestamp,label\nu,a,1,1\nu,b,1,1\nu,c,2,1\n");
  const auto log = load_interactions(p, {});
  const auto seqs = build_sequences(log, leave_one_out_split(log), 3);
  // Chronological order ties on time break by item id: a then b.
  EXPECT_FALSE(seqs[0].val[0].has_history());
}

TEST(Sequences, InputKeepsRightAlignedPositions) {
  Sample s;
  s.history = {kPadItem, 2, 0};
  s.mask = {0, 1, 1};
  ItemCatalog cat;
  cat.attr_vocab = {3, 2};
  cat.features = {{0, 1}, {1, 0}, {2, 1}};
  const auto in = to_sequence_input(s, cat);
  EXPECT_EQ(in.positions, (std::vector<std::int64_t>{0, 1, 2}));
  EXPECT_EQ(in.attr_ids[0], (std::vector<std::int64_t>{0, 2, 0}));
  EXPECT_EQ(in.attr_ids[1], (std::vector<std::int64_t>{0, 1, 1}));
}

TEST(Negatives, NeverTheClickedItem) {
  InteractionLog log;
  for (int i = 0; i < 5; ++i) log.items.encode("i" + std::to_string(i));
  log.users.encode("u");
  log.item_attrs.assign(5, {});
  for (int t = 0; t < 50; ++t) log.records.push_back({0, t % 5, t, 1, 0});
  add_uniform_negatives(log, 3, 7);
  ASSERT_EQ(log.records.size(), 200u);
  for (std::size_t r = 50; r < 200; ++r) {
    const auto& pos = log.records[(r - 50) / 3];
    EXPECT_EQ(log.records[r].label, 0);
    EXPECT_NE(log.records[r].item, pos.item);
    EXPECT_EQ(log.records[r].time, pos.time);
  }
}

TEST(Synthetic, DeterministicAndClusterStructured) {
  SyntheticSpec spec;
  spec.seed = 4;
  const auto a = synthetic_generate(spec);
  const auto b = synthetic_generate(spec);
  ASSERT_EQ(a.log.records.size(), b.log.records.size());
  for (std::size_t i = 0; i < a.log.records.size(); ++i) {
    EXPECT_EQ(a.log.records[i].item, b.log.records[i].item);
    EXPECT_EQ(a.log.records[i].label, b.log.records[i].label);
  }
  double own = 0, own_n = 0, other = 0, other_n = 0;
  for (const auto& r : a.log.records) {
    const bool same = a.user_cluster[static_cast<std::size_t>(r.user)] == a.item_cluster[static_cast<std::size_t>(r.item)];
    (same ? own : other) += r.label;
    (same ? own_n : other_n) += 1;
  }
  EXPECT_NEAR(own / own_n, 0.9, 0.03);
  EXPECT_NEAR(other / other_n, 0.1, 0.02);
  EXPECT_EQ(a.log.attr_vocab(), (std::vector<std::size_t>{80, 4}));
}

TEST(Synthetic, InvalidSpecRejected) {
  SyntheticSpec spec;
  spec.items_per_cluster = 30;
  EXPECT_THROW(synthetic_generate(spec), ConfigError);
}
