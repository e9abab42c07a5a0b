#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>

#include "support.hpp"
#include "tabgrade/io.hpp"
#include "tabgrade/table.hpp"

using namespace tabgrade;

namespace {

std::string column_names(const Schema& s) {
    std::string out;
    for (const auto& c : s.columns()) out += c.name + ":" + to_string(c.kind) + ";";
    return out;
}

}  // namespace

TEST(Csv, InfersIntegerAndCategorical) {
    const Table t = parse_csv("a,b\n1,x\n2,y\n");
    EXPECT_EQ(t.schema()[0].kind, ColumnKind::Integer);
    EXPECT_EQ(t.schema()[1].kind, ColumnKind::Categorical);
    EXPECT_EQ(std::get<std::int64_t>(t.at(1, 0)), 2);
    EXPECT_EQ(std::get<std::string>(t.at(0, 1)), "x");
}

TEST(Csv, RealValuePromotesToContinuous) {
    const Table t = parse_csv("a,b\n1,x\n1.5,x\n");
    EXPECT_EQ(t.schema()[0].kind, ColumnKind::Continuous);
    EXPECT_EQ(std::get<double>(t.at(0, 0)), 1.0);
}

TEST(Csv, RaggedRowNamesTheLine) {
    try {
        parse_csv("a,b\n1,x\n1,x,z\n");
        FAIL() << "expected a ragged-row error";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
    }
}

TEST(Csv, SchemaTypeConflictNamesTheColumn) {
    const Schema schema({{"age", ColumnKind::Integer}, {"b", ColumnKind::Categorical}});
    try {
        parse_csv("age,b\n1.5,x\n", schema);
        FAIL() << "expected a type conflict";
    } catch (const DataError& e) {
        EXPECT_NE(std::string(e.what()).find("age"), std::string::npos) << e.what();
    }
}

TEST(Csv, EmptyCellsAreMissingAndQuotesRoundTrip) {
    const Table t = parse_csv("a,b\n,\"x, y\"\n3,\"say \"\"hi\"\"\"\n");
    EXPECT_TRUE(is_missing(t.at(0, 0)));
    EXPECT_EQ(std::get<std::string>(t.at(0, 1)), "x, y");
    EXPECT_EQ(std::get<std::string>(t.at(1, 1)), "say \"hi\"");
    const Table back = parse_csv(format_csv(t), t.schema());
    EXPECT_EQ(back.rows(), t.rows());
}

TEST(Csv, MissingFileIsAnError) {
    EXPECT_ANY_THROW(load_csv("/nonexistent/file.csv"));
}

TEST(Csv, WriteReadRoundTripOnRandomTables) {
    Rng rng(5);
    for (int i = 0; i < 200; ++i) {
        const Table t = tabgrade::testing::random_table(rng, 6, 30);
        const Table back = parse_csv(format_csv(t), t.schema());
        ASSERT_EQ(back.rows(), t.rows()) << format_csv(t);
    }
}

TEST(Csv, InferenceIsIdempotent) {
    Rng rng(6);
    for (int i = 0; i < 200; ++i) {
        const Table t = tabgrade::testing::random_table(rng, 6, 30);
        const Table inferred = parse_csv(format_csv(t));
        const Table again = parse_csv(format_csv(inferred));
        ASSERT_EQ(column_names(again.schema()), column_names(inferred.schema()));
        ASSERT_EQ(again.rows(), inferred.rows());
    }
}

TEST(Csv, ContinuousValuesStayContinuousOnReread) {
    const Schema schema({{"x", ColumnKind::Continuous}});
    const Table t(schema, {{2.0}, {-3.0}, {0.1}});
    const Table back = parse_csv(format_csv(t));
    EXPECT_EQ(back.schema()[0].kind, ColumnKind::Continuous);
    EXPECT_EQ(back.rows(), t.rows());
}

TEST(Csv, FileRoundTrip) {
    const auto dir = std::filesystem::temp_directory_path() / "tabgrade_table_test";
    std::filesystem::create_directories(dir);
    const Table t = parse_csv("a,b,c\n1,x,0.5\n2,,1e-7\n");
    write_csv(t, dir / "t.csv");
    EXPECT_EQ(load_csv(dir / "t.csv", t.schema()).rows(), t.rows());
    std::filesystem::remove_all(dir);
}

TEST(TableInvariants, RejectsWrongArityAndKinds) {
    const Schema schema({{"a", ColumnKind::Integer}, {"b", ColumnKind::Categorical}});
    EXPECT_THROW(Table(schema, {{std::int64_t{1}}}), DataError);
    EXPECT_THROW(Table(schema, {{std::string("x"), std::string("y")}}), DataError);
    EXPECT_NO_THROW(Table(schema, {{Cell{}, Cell{}}}));
}

TEST(SchemaInvariants, NamesUniqueAndTargetExists) {
    EXPECT_THROW(Schema({{"a", ColumnKind::Integer}, {"a", ColumnKind::Integer}}), DataError);
    EXPECT_THROW(Schema({{"", ColumnKind::Integer}}), DataError);
    EXPECT_THROW(Schema({{"a", ColumnKind::Integer}}, std::string("b"), TaskKind::Regression), DataError);
    const Schema s({{"a", ColumnKind::Integer}}, std::string("a"), TaskKind::Regression);
    EXPECT_EQ(schema_from_json(schema_to_json(s)), s);
}

TEST(Split, SizesAndDisjointness) {
    std::vector<Row> rows;
    for (std::int64_t i = 0; i < 10; ++i) rows.push_back({i});
    const Table t(Schema({{"id", ColumnKind::Integer}}), rows);
    const auto [train, test] = split(t, 0.8, 42);
    EXPECT_EQ(train.num_rows(), 8u);
    EXPECT_EQ(test.num_rows(), 2u);
    std::vector<std::int64_t> ids;
    for (const auto& r : train.rows()) ids.push_back(std::get<std::int64_t>(r[0]));
    for (const auto& r : test.rows()) ids.push_back(std::get<std::int64_t>(r[0]));
    std::sort(ids.begin(), ids.end());
    for (std::int64_t i = 0; i < 10; ++i) EXPECT_EQ(ids[static_cast<std::size_t>(i)], i);
    const auto [train2, test2] = split(t, 0.8, 42);
    EXPECT_EQ(train2.rows(), train.rows());
    EXPECT_EQ(test2.rows(), test.rows());
}

TEST(Split, IsAPartitionOnRandomTables) {
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const Table t = tabgrade::testing::random_table(rng, 5, 40);
        const auto [a, b] = split(t, 0.8, static_cast<std::uint64_t>(i));
        EXPECT_EQ(a.num_rows(), static_cast<std::size_t>(0.8 * static_cast<double>(t.num_rows())));
        std::vector<std::string> lhs, rhs;
        for (const auto& r : t.rows()) lhs.push_back(format_csv(Table(t.schema(), {r})));
        for (const auto* part : {&a, &b}) {
            for (const auto& r : part->rows()) rhs.push_back(format_csv(Table(t.schema(), {r})));
        }
        std::sort(lhs.begin(), lhs.end());
        std::sort(rhs.begin(), rhs.end());
        ASSERT_EQ(lhs, rhs);
    }
}

TEST(Split, RejectsBadFraction) {
    const Table t(Schema({{"id", ColumnKind::Integer}}), {{std::int64_t{1}}});
    EXPECT_THROW(split(t, 0.0, 1), DataError);
    EXPECT_THROW(split(t, 1.0, 1), DataError);
    EXPECT_THROW(split(Table(Schema({{"id", ColumnKind::Integer}}), {}), 0.5, 1), DataError);
}

TEST(ColumnStats, NumericAndCategorical) {
    const Table t = parse_csv("x,y,z\n0,a,7\n4,b,7\n2,a,7\n");
    const auto x = column_stats(t, "x");
    EXPECT_EQ(x.min, 0.0);
    EXPECT_EQ(x.max, 4.0);
    EXPECT_EQ(x.range, 4.0);
    EXPECT_FALSE(x.degenerate);
    EXPECT_EQ(column_stats(t, "y").categories, (std::vector<std::string>{"a", "b"}));
    const auto z = column_stats(t, "z");
    EXPECT_EQ(z.range, 0.0);
    EXPECT_TRUE(z.degenerate);
    EXPECT_THROW(column_stats(t, "w"), DataError);
}

TEST(ColumnStats, AllMissingIsDegenerate) {
    const Table t(Schema({{"x", ColumnKind::Continuous}}), {{Cell{}}, {Cell{}}});
    const auto s = column_stats(t, "x");
    EXPECT_TRUE(s.degenerate);
    EXPECT_EQ(s.missing_count, 2u);
}
