//! Route every observed transition of a record to its training tables.

use super::records::HospitalizationRecord;
use super::tables::TrainingTables;
use crate::patient_model::{encode_into, PartialBeta, StepContext, SubProgramId};
use crate::simulators::TestType;
use crate::subprograms::Outcome;

/// Build the 13 training tables. Culture results are deterministic and never
/// produce result rows. Records must already be valid.
pub fn extract_training_tables(records: &[HospitalizationRecord]) -> TrainingTables {
    let mut tables = TrainingTables::new();
    let mut x = Vec::with_capacity(32);
    let mut row = |tables: &mut TrainingTables, id: SubProgramId, ctx: &StepContext<'_>, y: Outcome| {
        x.clear();
        encode_into(id, ctx, &mut x).expect("context is complete for the routed table");
        tables.get_mut(id).push(&x, y);
    };
    use SubProgramId::*;
    for rec in records {
        let alpha = &rec.alpha;
        for (i, ev) in rec.events.iter().enumerate() {
            let (mut ctx, ids) = if i == 0 {
                (StepContext::first(alpha), [Beta1Ab, Beta1Icu, Beta1Dia, T1, R1])
            } else {
                let prev = &rec.events[i - 1];
                let mut dctx = StepContext::first(alpha);
                dctx.beta = PartialBeta::complete(prev.beta);
                let did = if prev.result { DelayPos } else { DelayNeg };
                row(&mut tables, did, &dctx, Outcome::Positive(ev.delay_before));
                (
                    StepContext::after(alpha, prev.beta, prev.result, ev.delay_before),
                    [BetaIAb, BetaIIcu, BetaIDia, TI, RI],
                )
            };
            let [ab, icu, dia, t, r] = ids;
            row(&mut tables, ab, &ctx, Outcome::Count(ev.beta.ab_days_30));
            ctx.beta.ab = Some(ev.beta.ab_days_30);
            row(&mut tables, icu, &ctx, Outcome::Count(ev.beta.icu_days_7));
            ctx.beta.icu = Some(ev.beta.icu_days_7);
            row(&mut tables, dia, &ctx, Outcome::Bit(ev.beta.dialysis_7d));
            ctx.beta.dia = Some(ev.beta.dialysis_7d);
            let nare = ev.test_type == TestType::Nare;
            row(&mut tables, t, &ctx, Outcome::Bit(nare));
            if nare {
                row(&mut tables, r, &ctx, Outcome::Bit(ev.result));
            }
            ctx.result = Some(ev.result);
            row(&mut tables, Cont, &ctx, Outcome::Bit(i + 1 < rec.events.len()));
        }
    }
    tables
}
