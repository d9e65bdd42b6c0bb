// Excerpt of the lookup kernel with tunable sites.
void run_event_based_simulation(Inputs in, SimulationData SD, int mype)
{
	unsigned long long verification = 0;
	#Pp3 schedule(dynamic,#Pp1) reduction(+:verification)
	for (int i = 0; i < in.lookups; i += #Pp4) {
		#Pp2
		for (int ii = i; ii < MIN(i + #Pp4, in.lookups); ii++) {
			for (int k = 0; k < 5; k += #Pp5 > 5 ? 5 : #Pp5) {
				verification += lookup(ii, k, SD);
			}
		}
	}
}
